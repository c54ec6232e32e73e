"""Load → scaling factors → dispatch → angles → feasibility check → projection."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import decode_alpha
from .errors import HashMismatchError
from .grid import AdmittanceSystem, PowerNetwork, build_admittance
from .solver import (
    DcOpfProblem,
    Limits,
    SolverOptions,
    Status,
    evaluate_cost,
    l1_project,
    line_flows,
)

FEAS_TOL = 1e-6
FALLBACKS = ("none", "l1-projection")


@dataclass(frozen=True)
class Violation:
    kind: str  # "line", "gen_upper", "gen_lower" or "balance"
    index: int
    magnitude: float  # normalized

    @property
    def category(self) -> str:
        return "line" if self.kind == "line" else ("balance" if self.kind == "balance" else "generator")


def decode_generation(net: PowerNetwork, alpha, load) -> np.ndarray:
    """Full dispatch (MW): predicted units from α, fixed units at their setpoint,
    slack unit covering the remaining load."""
    p = np.zeros(net.n_gen)
    p[net.predicted_gens] = decode_alpha(net, alpha)
    p[net.fixed_gens] = net.p_min[net.fixed_gens]
    p[net.slack_gen] = np.sum(load) - np.sum(p)
    return p


def reconstruct_angles(adm: AdmittanceSystem, p_g, load) -> np.ndarray:
    """Bus angles (rad) from nodal injections with the slack angle fixed at 0.

    ``p_g`` is per generator (MW), ``load`` per bus (MW).
    """
    inj = -np.array(load, dtype=float)
    inj[adm.gen_pos] += p_g  # one generator per bus
    inj /= adm.base_mva
    theta = np.zeros(adm.n_bus)
    theta[adm.non_slack_pos] = adm.solve_reduced(inj[adm.non_slack_pos])
    return theta


def check_feasibility(
    net: PowerNetwork,
    p_g,
    theta,
    limits: Limits | None = None,
    load=None,
    adm: AdmittanceSystem | None = None,
    tol: float = FEAS_TOL,
) -> tuple[bool, list[Violation]]:
    """Check generator bounds (slack included) and both directions of every line.

    Line magnitudes are ``|flow|/cap - 1``; generator magnitudes are the
    excess over the bound divided by the generator's range. When ``load`` is
    given the power balance is checked as well, relative to total load.
    """
    limits = limits or Limits.original(net)
    adm = adm or build_admittance(net)
    p_g = np.asarray(p_g, dtype=float)
    out: list[Violation] = []
    if load is not None:
        total = float(np.sum(load))
        mismatch = abs(p_g.sum() - total) / max(1.0, abs(total))
        if mismatch > tol:
            out.append(Violation("balance", -1, mismatch))
    width = np.maximum(limits.p_max - limits.p_min, net.base_mva * 1e-6)
    up = (p_g - limits.p_max) / width
    lo = (limits.p_min - p_g) / width
    rel = np.abs(line_flows(adm, theta)) / limits.line_cap - 1.0
    if max(up.max(), lo.max(), rel.max(initial=-1.0)) <= tol:
        return not out, out
    out += [Violation("gen_upper", int(i), float(up[i])) for i in np.flatnonzero(up > tol)]
    out += [Violation("gen_lower", int(i), float(lo[i])) for i in np.flatnonzero(lo > tol)]
    out += [Violation("line", int(k), float(rel[k])) for k in np.flatnonzero(rel > tol)]
    return not out, out


@dataclass
class PredictionResult:
    p_g_hat: np.ndarray  # MW, raw prediction incl. slack
    theta_hat: np.ndarray  # rad
    feasible_direct: bool
    violations: list[Violation]
    projected: bool
    p_g: np.ndarray  # final dispatch (projected if applied)
    cost: float  # $/h of final dispatch
    timing: dict = field(default_factory=dict)  # seconds per stage
    status: str = "ok"

    @property
    def total_time(self) -> float:
        return float(sum(self.timing.values()))

    def to_json(self) -> str:
        return json.dumps({
            "p_g_hat": self.p_g_hat.tolist(),
            "theta_hat": self.theta_hat.tolist(),
            "feasible_direct": self.feasible_direct,
            "violations": [[v.kind, v.index, v.magnitude] for v in self.violations],
            "projected": self.projected,
            "p_g": self.p_g.tolist(),
            "cost": self.cost,
            "timing": self.timing,
            "status": self.status,
        })


class Predictor:
    """Immutable bundle of a model, its network and the factorized B̃.

    ``model`` needs ``predict_alpha(loads_at_load_buses)`` and
    ``network_hash``; anything with that surface works (see ``OracleModel``).
    """

    def __init__(self, model, net: PowerNetwork, adm: AdmittanceSystem | None = None,
                 opts: SolverOptions = SolverOptions()):
        if getattr(model, "network_hash", net.digest) != net.digest:
            raise HashMismatchError(
                f"model belongs to network {model.network_hash}, not {net.network_id}"
            )
        self.model = model
        self.net = net
        self.adm = adm or build_admittance(net)
        self.limits = Limits.original(net)
        self.opts = opts

    def predict(self, load, fallback: str = "l1-projection") -> PredictionResult:
        if fallback not in FALLBACKS:
            raise ValueError(f"unknown fallback {fallback!r}")
        net, adm = self.net, self.adm
        load = np.asarray(load, dtype=float)
        t0 = time.perf_counter()
        alpha = self.model.predict_alpha(load[net.load_pos][None, :])[0]
        t1 = time.perf_counter()
        p_hat = decode_generation(net, alpha, load)
        theta = reconstruct_angles(adm, p_hat, load)
        t2 = time.perf_counter()
        ok, viol = check_feasibility(net, p_hat, theta, self.limits, adm=adm)
        t3 = time.perf_counter()
        timing = {"dnn": t1 - t0, "reconstruct": t2 - t1, "check": t3 - t2, "projection": 0.0}
        p_final, projected, status = p_hat, False, "ok"
        if not ok and fallback == "l1-projection":
            sol = l1_project(DcOpfProblem(net, load, self.limits), p_hat, self.opts, adm=adm)
            timing["projection"] = time.perf_counter() - t3
            projected = True
            if sol.status == Status.OPTIMAL:
                p_final = sol.p_g
            else:
                status = f"projection-{sol.status.value}"
        return PredictionResult(
            p_g_hat=p_hat,
            theta_hat=theta,
            feasible_direct=ok,
            violations=viol,
            projected=projected,
            p_g=p_final,
            cost=evaluate_cost(net, p_final),
            timing=timing,
            status=status,
        )


def predict(model, net: PowerNetwork, load, fallback: str = "l1-projection") -> PredictionResult:
    return Predictor(model, net).predict(load, fallback)


class OracleModel:
    """Stand-in model returning stored ground-truth scaling factors.

    Looks samples up by their exact load vector.
    """

    def __init__(self, dataset, net: PowerNetwork):
        self.network_hash = net.digest
        self._table = {
            np.ascontiguousarray(row).tobytes(): a for row, a in zip(dataset.loads, dataset.alpha)
        }

    def predict_alpha(self, loads) -> np.ndarray:
        loads = np.atleast_2d(np.asarray(loads, dtype=float))
        return np.array([self._table[np.ascontiguousarray(r).tobytes()] for r in loads])
