"""Reference DC-OPF solver and l1-projection.

Both problems go through one dense primal-dual interior-point core
(Mehrotra predictor-corrector) for

    min ½ xᵀQx + cᵀx   s.t.  Ax = b,  Gx ≤ h.

DC-OPF variables are (P_G, Θ̃) in per-unit with the nodal balance kept as
equality rows.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg

from .grid import AdmittanceSystem, PowerNetwork, build_admittance

log = logging.getLogger(__name__)


class Status(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITERATIONS = "max-iterations"


@dataclass(frozen=True)
class SolverOptions:
    tol_kkt: float = 1e-8
    tol_gap: float = 1e-8
    max_iter: int = 100
    verbosity: int = 0
    # infeasibility: primal residual stuck above this level ...
    infeas_level: float = 1e-6
    # ... for this many consecutive iterations
    infeas_window: int = 10
    start_margin: float = 1.0


# -- generic QP core -------------------------------------------------------------


@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    status: Status
    iterations: int
    residuals: dict


def _max_step(v, dv):
    neg = dv < 0
    if not neg.any():
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def kkt_residuals(Q, c, A, b, G, h, x, y, z, s) -> dict:
    """Scaled KKT residuals of a QP point (all dimensionless)."""
    scale_d = 1.0 + max(np.abs(c).max(initial=0.0), np.abs(Q).max(initial=0.0))
    obj = 0.5 * x @ Q @ x + c @ x
    return {
        "stationarity": float(np.abs(Q @ x + c + A.T @ y + G.T @ z).max(initial=0.0) / scale_d),
        "primal_eq": float(np.abs(A @ x - b).max(initial=0.0) / (1.0 + np.abs(b).max(initial=0.0))),
        "primal_ineq": float(np.maximum(G @ x - h, 0.0).max(initial=0.0) / (1.0 + np.abs(h).max(initial=0.0))),
        "slack_consistency": float(np.abs(G @ x + s - h).max(initial=0.0) / (1.0 + np.abs(h).max(initial=0.0))),
        "dual_feasibility": float(np.maximum(-z, 0.0).max(initial=0.0)),
        "complementarity": float((s * z).max(initial=0.0) / scale_d),
        "gap": float(s @ z / (1.0 + abs(obj)) / scale_d),
    }


def solve_qp(Q, c, A, b, G, h, x0, opts: SolverOptions = SolverOptions()) -> QPResult:
    n, p, m = len(c), len(b), len(h)
    x = np.array(x0, dtype=float)
    s = np.maximum(h - G @ x, opts.start_margin)
    z = np.ones(m)
    y = np.zeros(p)
    reg_p = 1e-12 * np.eye(p)
    scale_d = 1.0 + max(np.abs(c).max(initial=0.0), np.abs(Q).max(initial=0.0))
    scale_b = 1.0 + np.abs(b).max(initial=0.0)
    scale_h = 1.0 + np.abs(h).max(initial=0.0)

    status = Status.MAX_ITERATIONS
    stall = 0
    prev_pres = np.inf
    it = 0
    for it in range(opts.max_iter + 1):
        rd = Q @ x + c + A.T @ y + G.T @ z
        rp = A @ x - b
        rg = G @ x + s - h
        mu = s @ z / m if m else 0.0
        obj = 0.5 * x @ Q @ x + c @ x
        dres = np.abs(rd).max(initial=0.0) / scale_d
        pres = max(np.abs(rp).max(initial=0.0) / scale_b, np.abs(rg).max(initial=0.0) / scale_h)
        gap = (s @ z) / (1.0 + abs(obj)) / scale_d
        comp = (s * z).max(initial=0.0) / scale_d
        if opts.verbosity > 1:
            log.info("it %3d  obj %.10e  pres %.2e  dres %.2e  gap %.2e", it, obj, pres, dres, gap)
        if pres <= opts.tol_kkt and dres <= opts.tol_kkt and comp <= opts.tol_kkt and gap <= opts.tol_gap:
            status = Status.OPTIMAL
            break
        if pres > opts.infeas_level and pres >= 0.95 * prev_pres:
            stall += 1
            if stall >= opts.infeas_window:
                status = Status.INFEASIBLE
                break
        else:
            stall = 0
        prev_pres = pres
        if it == opts.max_iter:
            break

        w = z / s
        H = Q + (G.T * w) @ G
        K = np.block([[H, A.T], [A, -reg_p]])
        try:
            fac = scipy.linalg.lu_factor(K, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            status = Status.INFEASIBLE
            break

        def direction(rc):
            t = (z * rg - rc) / s
            rhs = np.concatenate([-rd - G.T @ t, -rp])
            sol = scipy.linalg.lu_solve(fac, rhs, check_finite=False)
            dx, dy = sol[:n], sol[n:]
            gdx = G @ dx
            dz = t + w * gdx
            ds = -rg - gdx
            return dx, dy, dz, ds

        # predictor
        dx, dy, dz, ds = direction(s * z)
        a_aff = min(_max_step(s, ds), _max_step(z, dz))
        mu_aff = (s + a_aff * ds) @ (z + a_aff * dz) / m if m else 0.0
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        dx, dy, dz, ds = direction(s * z + ds * dz - sigma * mu)
        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        if not np.all(np.isfinite(dx)):
            status = Status.INFEASIBLE
            break
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
    res = kkt_residuals(Q, c, A, b, G, h, x, y, z, s)
    return QPResult(x, y, z, s, status, it, res)


# -- DC-OPF ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Limits:
    """Effective limits in MW: generator bounds and line capacities."""

    p_min: np.ndarray
    p_max: np.ndarray
    line_cap: np.ndarray

    @classmethod
    def original(cls, net: PowerNetwork) -> "Limits":
        return cls(net.p_min.copy(), net.p_max.copy(), net.capacity.copy())

    def __eq__(self, other):
        if not isinstance(other, Limits):
            return NotImplemented
        return all(
            np.array_equal(a, b)
            for a, b in ((self.p_min, other.p_min), (self.p_max, other.p_max), (self.line_cap, other.line_cap))
        )


@dataclass(frozen=True, eq=False)
class DcOpfProblem:
    network: PowerNetwork
    load: np.ndarray  # MW per bus
    limits: Limits | None = None

    def __post_init__(self):
        load = np.asarray(self.load, dtype=float)
        if load.shape != (self.network.n_bus,):
            raise ValueError(f"load vector has shape {load.shape}, expected ({self.network.n_bus},)")
        object.__setattr__(self, "load", load)
        if self.limits is None:
            object.__setattr__(self, "limits", Limits.original(self.network))

    def possibly_infeasible(self) -> bool:
        total = self.load.sum()
        return bool(total > self.limits.p_max.sum() or total < self.limits.p_min.sum())


@dataclass
class DispatchSolution:
    p_g: np.ndarray  # MW per generator
    theta: np.ndarray  # rad per bus, slack entry 0
    cost: float  # $/h
    status: Status
    solve_time: float  # s
    duality_gap: float
    iterations: int = 0
    kkt: dict = field(default_factory=dict)
    l1_distance: float | None = None  # MW, projections only

    @property
    def optimal(self) -> bool:
        return self.status == Status.OPTIMAL


def evaluate_cost(net: PowerNetwork, p_g) -> float:
    """Total generation cost in $/h for a dispatch in MW."""
    p = np.asarray(p_g, dtype=float)
    if p.shape != (net.n_gen,):
        raise ValueError(f"dispatch has shape {p.shape}, expected ({net.n_gen},)")
    c = net.cost_coeffs
    return float(np.sum(c[:, 0] * p * p + c[:, 1] * p + c[:, 2]))


class _Layout:
    """Constraint matrices of the per-unit DC-OPF feasible set."""

    def __init__(self, net: PowerNetwork, adm: AdmittanceSystem, load, limits: Limits, fix_tol=1e-9):
        base = net.base_mva
        ng, nb = net.n_gen, net.n_bus
        nt = nb - 1
        self.ng, self.nt = ng, nt
        keep = adm.non_slack_pos
        pmin, pmax = limits.p_min / base, limits.p_max / base
        fixed = (pmax - pmin) <= fix_tol
        self.fixed = fixed
        # nodal balance: B[:,keep] θ̃ - Cg p = -Pd
        a_bal = np.hstack([-net.gen_incidence, adm.b_full[:, keep]])
        b_bal = -np.asarray(load, dtype=float) / base
        nf = int(fixed.sum())
        a_fix = np.zeros((nf, ng + nt))
        a_fix[np.arange(nf), np.flatnonzero(fixed)] = 1.0
        self.A = np.vstack([a_bal, a_fix])
        self.b = np.concatenate([b_bal, pmin[fixed]])
        free = np.flatnonzero(~fixed)
        eye = np.zeros((len(free), ng + nt))
        eye[np.arange(len(free)), free] = 1.0
        cap = limits.line_cap / base
        x_red = np.hstack([np.zeros((net.n_branch, ng)), adm.x_incidence_reduced])
        self.G = np.vstack([eye, -eye, x_red, -x_red])
        self.h = np.concatenate([pmax[free], -pmin[free], cap, cap])
        self.x0 = np.concatenate([0.5 * (pmin + pmax), np.zeros(nt)])


def solve_dcopf(
    prob: DcOpfProblem,
    opts: SolverOptions = SolverOptions(),
    adm: AdmittanceSystem | None = None,
) -> DispatchSolution:
    """Cold-start interior-point solve of a DC-OPF instance."""
    t0 = time.perf_counter()
    net = prob.network
    if adm is None:
        adm = build_admittance(net)
    if prob.possibly_infeasible():
        log.debug("total load outside aggregate generation range; attempting anyway")
    lay = _Layout(net, adm, prob.load, prob.limits)
    base = net.base_mva
    c2, c1 = net.cost_coeffs[:, 0] * base * base, net.cost_coeffs[:, 1] * base
    scale = max(1.0, np.abs(c1).max(initial=0.0), 2 * np.abs(c2).max(initial=0.0))
    nx = lay.ng + lay.nt
    Q = np.zeros((nx, nx))
    Q[np.arange(lay.ng), np.arange(lay.ng)] = 2.0 * c2 / scale
    c = np.concatenate([c1 / scale, np.zeros(lay.nt)])
    res = solve_qp(Q, c, lay.A, lay.b, lay.G, lay.h, lay.x0, opts)
    p_g = res.x[: lay.ng] * base
    theta = np.zeros(net.n_bus)
    theta[adm.non_slack_pos] = res.x[lay.ng:]
    elapsed = time.perf_counter() - t0
    return DispatchSolution(
        p_g=p_g,
        theta=theta,
        cost=evaluate_cost(net, p_g),
        status=res.status,
        solve_time=elapsed,
        duality_gap=res.residuals["gap"],
        iterations=res.iterations,
        kkt=res.residuals,
    )


# -- feasibility primitives ---------------------------------------------------------


def line_flows(adm: AdmittanceSystem, theta) -> np.ndarray:
    """Branch flows in MW for a full angle vector."""
    return adm.x_incidence @ theta * adm.base_mva


def angles_from_dispatch(adm: AdmittanceSystem, net: PowerNetwork, p_g, load) -> np.ndarray:
    inj = (net.gen_incidence @ np.asarray(p_g, dtype=float) - np.asarray(load, dtype=float)) / net.base_mva
    theta = np.zeros(net.n_bus)
    theta[adm.non_slack_pos] = adm.solve_reduced(inj[adm.non_slack_pos])
    return theta


def is_feasible(net, adm, limits: Limits, p_g, load, tol=1e-6) -> bool:
    """Balance, generator bounds and line limits within a normalized tolerance."""
    p_g = np.asarray(p_g, dtype=float)
    load = np.asarray(load, dtype=float)
    total = max(1.0, abs(load.sum()))
    if abs(p_g.sum() - load.sum()) > tol * total:
        return False
    width = np.maximum(limits.p_max - limits.p_min, net.base_mva * 1e-6)
    if np.any((p_g - limits.p_max) / width > tol) or np.any((limits.p_min - p_g) / width > tol):
        return False
    flows = line_flows(adm, angles_from_dispatch(adm, net, p_g, load))
    return bool(np.all(np.abs(flows) / limits.line_cap <= 1.0 + tol))


# -- l1 projection -------------------------------------------------------------------


def l1_project(
    prob: DcOpfProblem,
    p_hat,
    opts: SolverOptions = SolverOptions(),
    adm: AdmittanceSystem | None = None,
    tol: float = 1e-6,
) -> DispatchSolution:
    """Nearest feasible dispatch to ``p_hat`` in l1 distance.

    A point that already satisfies every constraint (within ``tol``) is
    returned unchanged.
    """
    t0 = time.perf_counter()
    net = prob.network
    if adm is None:
        adm = build_admittance(net)
    p_hat = np.asarray(p_hat, dtype=float)
    if p_hat.shape != (net.n_gen,):
        raise ValueError(f"p_hat has shape {p_hat.shape}, expected ({net.n_gen},)")
    if is_feasible(net, adm, prob.limits, p_hat, prob.load, tol):
        theta = angles_from_dispatch(adm, net, p_hat, prob.load)
        return DispatchSolution(
            p_g=p_hat.copy(), theta=theta, cost=evaluate_cost(net, p_hat), status=Status.OPTIMAL,
            solve_time=time.perf_counter() - t0, duality_gap=0.0, l1_distance=0.0,
        )
    base = net.base_mva
    lay = _Layout(net, adm, prob.load, prob.limits)
    ng, nt = lay.ng, lay.nt
    nx = ng + nt + 2 * ng
    # p - u⁺ + u⁻ = p̂
    a_dev = np.zeros((ng, nx))
    a_dev[:, :ng] = np.eye(ng)
    a_dev[:, ng + nt: ng + nt + ng] = -np.eye(ng)
    a_dev[:, ng + nt + ng:] = np.eye(ng)
    A = np.vstack([np.hstack([lay.A, np.zeros((lay.A.shape[0], 2 * ng))]), a_dev])
    b = np.concatenate([lay.b, p_hat / base])
    G = np.vstack([
        np.hstack([lay.G, np.zeros((lay.G.shape[0], 2 * ng))]),
        np.hstack([np.zeros((2 * ng, ng + nt)), -np.eye(2 * ng)]),
    ])
    h = np.concatenate([lay.h, np.zeros(2 * ng)])
    c = np.concatenate([np.zeros(ng + nt), np.ones(2 * ng)])
    Q = 1e-10 * np.eye(nx)
    dev0 = p_hat / base - lay.x0[:ng]
    x0 = np.concatenate([lay.x0, np.maximum(-dev0, 0) + 1.0, np.maximum(dev0, 0) + 1.0])
    res = solve_qp(Q, c, A, b, G, h, x0, opts)
    p_g = res.x[:ng] * base
    theta = np.zeros(net.n_bus)
    theta[adm.non_slack_pos] = res.x[ng:ng + nt]
    return DispatchSolution(
        p_g=p_g,
        theta=theta,
        cost=evaluate_cost(net, p_g),
        status=res.status,
        solve_time=time.perf_counter() - t0,
        duality_gap=res.residuals["gap"],
        iterations=res.iterations,
        kkt=res.residuals,
        l1_distance=float(np.abs(p_g - p_hat).sum()),
    )
