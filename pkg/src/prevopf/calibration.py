"""PTDF sensitivities and preventive tightening of line and slack limits."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, SingularNetworkError
from .grid import AdmittanceSystem, PowerNetwork
from .solver import Limits


@dataclass(frozen=True, eq=False)
class SensitivityMatrix:
    """``m`` maps non-slack bus injections (MW) to branch flows (MW).

    ``k[i]`` is the worst-case flow change on branch i per MW of error when
    every non-slack injection may err by up to 1 MW.
    """

    m: np.ndarray
    k: np.ndarray
    non_slack_pos: np.ndarray

    def k_restricted(self, bus_pos) -> np.ndarray:
        """Amplification when only injections at ``bus_pos`` may err."""
        cols = np.flatnonzero(np.isin(self.non_slack_pos, bus_pos))
        return np.abs(self.m[:, cols]).sum(axis=1)


def compute_sensitivity(adm: AdmittanceSystem) -> SensitivityMatrix:
    n_red = adm.b_reduced.shape[0]
    if n_red == 0:
        m = np.zeros((adm.x_incidence.shape[0], 0))
    else:
        # M = X̃ B̃⁻¹  <=>  B̃ᵀ Mᵀ = X̃ᵀ
        m = adm.solve_reduced(adm.x_incidence_reduced.T, trans=1).T
        if not np.all(np.isfinite(m)):
            raise SingularNetworkError("sensitivity solve produced non-finite entries")
    return SensitivityMatrix(m=m, k=np.abs(m).sum(axis=1), non_slack_pos=adm.non_slack_pos.copy())


def worst_case_error_bound(lambda_lip: float, d: float, n_neurons: int, n_hid: int) -> float:
    """Lower bound on the worst-case approximation error of a ReLU network.

    Λ·d / (4·(2·N_n)^N_hid) for a target with Lipschitz constant Λ on a
    domain of diameter d, approximated by ``n_hid`` hidden layers of at most
    ``n_neurons`` units.
    """
    for name, v in (("lambda_lip", lambda_lip), ("d", d), ("n_neurons", n_neurons), ("n_hid", n_hid)):
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v}")
    return lambda_lip * d / (4.0 * (2.0 * n_neurons) ** n_hid)


@dataclass(frozen=True)
class CalibrationPlan:
    """How much to tighten limits when generating training data.

    In ``absolute`` mode ``line_margin`` is a per-branch tuple of MW and
    ``slack_margin`` is MW. In ``percent`` mode both hold the same fraction c.
    """

    mode: str
    line_margin: tuple[float, ...] | float
    slack_margin: float
    note: str = ""

    def __post_init__(self):
        if self.mode not in ("absolute", "percent"):
            raise ValueError(f"unknown calibration mode {self.mode!r}")
        if self.mode == "absolute":
            object.__setattr__(self, "line_margin", tuple(float(v) for v in self.line_margin))
            if any(v < 0 for v in self.line_margin) or self.slack_margin < 0:
                raise CalibrationError("calibration margins must be non-negative")
        else:
            c = float(self.line_margin)
            if not 0.0 <= c < 1.0:
                raise CalibrationError(f"calibration fraction must lie in [0, 1), got {c}")

    @property
    def is_zero(self) -> bool:
        if self.mode == "percent":
            return self.line_margin == 0.0
        return not any(self.line_margin) and self.slack_margin == 0.0

    @property
    def label(self) -> str:
        if self.mode == "percent":
            return f"{100 * self.line_margin:g}%"
        return self.note or "absolute"

    def to_dict(self) -> dict:
        margin = list(self.line_margin) if self.mode == "absolute" else self.line_margin
        return {"mode": self.mode, "line_margin": margin, "slack_margin": self.slack_margin, "note": self.note}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationPlan":
        return cls(d["mode"], d["line_margin"], float(d["slack_margin"]), d.get("note", ""))


def plan_from_percent(c: float) -> CalibrationPlan:
    if not 0.0 <= c < 1.0:
        raise CalibrationError(f"calibration fraction must lie in [0, 1), got {c}")
    return CalibrationPlan("percent", float(c), float(c), note=f"percent c={c:g}")


def plan_from_epsilon(
    sens: SensitivityMatrix, n_gens: int, epsilon: float, net: PowerNetwork | None = None
) -> CalibrationPlan:
    """Margins k_i·ε per branch and (n_gens-1)·ε on the slack generator.

    When ``net`` is given the plan is checked against its limits.
    """
    if not epsilon >= 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    plan = CalibrationPlan(
        "absolute",
        tuple(sens.k * epsilon),
        (n_gens - 1) * epsilon,
        note=f"epsilon={epsilon:g} MW",
    )
    if net is not None:
        apply_plan(net, plan)
    return plan


def apply_plan(net: PowerNetwork, plan: CalibrationPlan) -> Limits:
    """Calibrated limits; only line capacities and the slack range change."""
    lim = Limits.original(net)
    s = net.slack_gen
    lo, hi = lim.p_min[s], lim.p_max[s]
    if plan.mode == "percent":
        c = plan.line_margin
        cap = lim.line_cap * (1.0 - c)
        shrink = c * (hi - lo)
    else:
        eta = np.asarray(plan.line_margin, dtype=float)
        if eta.shape != lim.line_cap.shape:
            raise CalibrationError(
                f"plan has {eta.size} line margins, network has {lim.line_cap.size} branches"
            )
        cap = lim.line_cap - eta
        shrink = plan.slack_margin
    bad = np.flatnonzero(~(cap > 0))
    if bad.size:
        k = int(bad[0])
        br = net.branches[k]
        raise CalibrationError(
            f"margin exceeds capacity on branch {k} ({br.from_bus}-{br.to_bus}): "
            f"{br.capacity} MW -> {cap[k]:.6g} MW",
            line=k,
        )
    new_lo, new_hi = lo + shrink, hi - shrink
    if new_lo > new_hi:
        raise CalibrationError(
            f"calibrated slack range is empty: [{new_lo:.6g}, {new_hi:.6g}] MW"
        )
    p_min, p_max = lim.p_min.copy(), lim.p_max.copy()
    p_min[s], p_max[s] = new_lo, new_hi
    return Limits(p_min, p_max, cap)
