"""Acceptance criteria 1-9. Each test carries ``criterion(n)`` and reports one line.

Criteria 5-7 train case30 models on 5000 samples and take several minutes.
"""

from fractions import Fraction

import numpy as np
import pytest

from oracles import brute_force_dispatch, composite_loss, fd_check, flows_oracle, net_ptdf_oracle, random_network
from prevopf.bench import evaluate, run_sweep
from prevopf.calibration import apply_plan, compute_sensitivity, plan_from_percent, worst_case_error_bound
from prevopf.dataset import REGIMES, generate_split
from prevopf.grid import build_admittance
from prevopf.mlp import MlpModel, PenaltyOperator, TrainConfig, loss, loss_and_grad
from prevopf.pipeline import OracleModel, check_feasibility, decode_generation, reconstruct_angles
from prevopf.solver import DcOpfProblem, Limits, is_feasible, l1_project, line_flows, solve_dcopf

SEEDS = (1, 2, 3)
N_TRAIN, N_TEST = 5000, 1000
# the 1e-3 default converges too slowly for 200 epochs here; see README
TRAIN = dict(epochs=200, lr=0.1)


@pytest.fixture(scope="session")
def case30_runs(case30):
    """Per seed: shared test set plus one evaluated model per calibration value."""
    runs = {}
    for seed in SEEDS:
        test = generate_split(case30, None, N_TEST, "test", REGIMES["full"], seed)
        cs = [0.0, 0.005, 0.035, 0.07] if seed == SEEDS[0] else [0.0, 0.035]
        entries = run_sweep(case30, cs, N_TRAIN, N_TEST, seed, TrainConfig(seed=seed, **TRAIN), test=test)
        runs[seed] = {"test": test, **{e.c: e for e in entries}}
    return runs


# -- 1 --------------------------------------------------------------------------------


@pytest.mark.criterion(1)
def test_criterion_1_solver_matches_brute_force(report_detail):
    rng = np.random.default_rng(20240601)
    worst_p = worst_c = worst_kkt = 0.0
    for _ in range(50):
        n_bus = int(rng.integers(3, 11))
        net, load = random_network(rng, n_bus=n_bus, n_gen=int(rng.integers(2, 4)))
        sol = solve_dcopf(DcOpfProblem(net, load))
        assert sol.optimal
        p_ref, c_ref = brute_force_dispatch(net, load)
        assert p_ref is not None
        worst_p = max(worst_p, np.abs(sol.p_g - p_ref).max())
        worst_c = max(worst_c, abs(sol.cost - c_ref) / abs(c_ref))
        worst_kkt = max(worst_kkt, max(sol.kkt.values()))
    report_detail(f"max dispatch gap {worst_p:.2e} MW, max cost gap {worst_c:.2e}, max KKT {worst_kkt:.2e}")
    assert worst_p <= 1e-2 and worst_c <= 1e-4 and worst_kkt <= 1e-8


# -- 2 --------------------------------------------------------------------------------


@pytest.mark.criterion(2)
def test_criterion_2_flow_offset_bound(report_detail):
    rng = np.random.default_rng(7)
    violations, worst_ratio = 0, 1.0
    for _ in range(20):
        net, _ = random_network(rng)
        adm = build_admittance(net)
        k = compute_sensitivity(adm).k
        eps = float(rng.uniform(0.1, 20.0))
        deltas = rng.uniform(-eps, eps, size=(1000, net.n_bus - 1))
        # offsets through the angle solve, one perturbation per column
        theta = np.zeros((net.n_bus, 1000))
        theta[adm.non_slack_pos] = adm.solve_reduced(deltas.T / net.base_mva)
        offsets = adm.x_incidence @ theta * net.base_mva
        violations += int(np.sum(np.abs(offsets) > (k * eps * (1 + 1e-12))[:, None]))
        m_ref, _ = net_ptdf_oracle(net)
        for i in range(net.n_branch):
            th = np.zeros(net.n_bus)
            th[adm.non_slack_pos] = adm.solve_reduced(eps * np.sign(m_ref[i]) / net.base_mva)
            worst_ratio = min(worst_ratio, abs(line_flows(adm, th)[i]) / (k[i] * eps))
    report_detail(f"{violations} bound violations in 20000 draws; adversarial reach {100 * worst_ratio:.4f}%")
    assert violations == 0 and worst_ratio >= 0.999


# -- 3 --------------------------------------------------------------------------------


@pytest.mark.criterion(3)
def test_criterion_3_error_bound_exact(report_detail):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        lam, d = float(rng.uniform(1e-3, 1e3)), float(rng.uniform(1e-3, 1e3))
        nn, nh = int(rng.integers(1, 513)), int(rng.integers(1, 9))
        exact = Fraction(lam) * Fraction(d) / (4 * (2 * nn) ** nh)
        got = Fraction(worst_case_error_bound(lam, d, nn, nh))
        worst = max(worst, float(abs(got - exact) / exact))
    report_detail(f"max relative deviation {worst:.2e} over 100 tuples")
    assert worst <= 1e-12


# -- 4 --------------------------------------------------------------------------------


@pytest.mark.criterion(4)
def test_criterion_4_gradient_check(report_detail):
    rng = np.random.default_rng(44)
    worst = 0.0
    active = 0
    for trial in range(20):
        net, load = random_network(rng, n_bus=int(rng.integers(3, 7)), n_gen=int(rng.integers(2, 4)))
        lim = apply_plan(net, plan_from_percent(float(rng.uniform(0.0, 0.3))))
        pen = PenaltyOperator(net, lim)
        n_in, n_out = len(net.load_pos), len(net.predicted_gens)
        hidden = tuple(int(h) for h in rng.integers(2, 6, size=int(rng.integers(1, 3))))
        model = MlpModel.initialize((n_in, *hidden, n_out), seed=trial)
        for b in model.biases:
            b[:] = rng.normal(0, 0.5, size=b.shape)
        batch = int(rng.integers(2, 6))
        loads = load[net.load_pos] * rng.uniform(0.8, 1.8, size=(batch, n_in))
        x = rng.normal(size=(batch, n_in))
        alpha = rng.random((batch, n_out))
        w1, w2 = rng.uniform(0.5, 2.0, 2)
        active += loss(model, x, alpha, loads, pen, w1, w2)[2] > 0

        def fn(numeric):
            if numeric:
                return composite_loss(model, net, lim, x, alpha, loads, w1, w2)
            return loss_and_grad(model, x, alpha, loads, pen, w1, w2)

        worst = max(worst, fd_check(model, fn))
    report_detail(f"max relative gradient gap {worst:.2e}; penalty active in {active}/20 configurations")
    assert worst <= 1e-4 and active > 0


# -- 5 --------------------------------------------------------------------------------


@pytest.mark.criterion(5)
@pytest.mark.slow
def test_criterion_5_case30_calibration(case30_runs, report_detail):
    passed, parts = 0, []
    for seed in SEEDS:
        cal = case30_runs[seed][0.035].report.aggregates
        raw = case30_runs[seed][0.0].report.aggregates
        ok = (cal["feasibility_rate"] >= 99.0 and cal["optimality_loss"] <= 1.0
              and raw["feasibility_rate"] < cal["feasibility_rate"])
        passed += ok
        parts.append(f"s{seed}: {cal['feasibility_rate']:.1f}%/{cal['optimality_loss']:.3f}% "
                     f"vs {raw['feasibility_rate']:.1f}% {'ok' if ok else 'miss'}")
    report_detail(f"{passed}/3 seeds pass (c=3.5% feas/loss vs c=0 feas): " + "; ".join(parts))
    assert passed >= 2


# -- 6 --------------------------------------------------------------------------------


def _non_decreasing_with_one_tie(values):
    """Non-decreasing, and at most one adjacent pair is exactly equal."""
    steps = np.diff(values)
    return bool(np.all(steps >= 0) and np.sum(steps == 0) <= 1)


@pytest.mark.criterion(6)
@pytest.mark.slow
def test_criterion_6_monotone_trend(case30_runs, report_detail):
    run = case30_runs[SEEDS[0]]
    cs = (0.005, 0.035, 0.07)
    aggs = [run[c].report.aggregates for c in cs]
    feas = [a["feasibility_rate"] for a in aggs]
    cost = [a["optimality_loss"] for a in aggs]
    report_detail("c=0.5/3.5/7%: feasibility " + "/".join(f"{f:.1f}" for f in feas)
                  + ", loss " + "/".join(f"{v:.3f}" for v in cost))
    assert _non_decreasing_with_one_tie(feas) and _non_decreasing_with_one_tie(cost)


def test_tie_rule():
    assert _non_decreasing_with_one_tie([90.0, 99.0, 99.0])
    assert not _non_decreasing_with_one_tie([99.0, 99.0, 99.0])
    assert not _non_decreasing_with_one_tie([90.0, 99.5, 99.0])


# -- 7 --------------------------------------------------------------------------------


@pytest.mark.criterion(7)
@pytest.mark.slow
def test_criterion_7_speedup(case30_runs, report_detail):
    speed = []
    for seed in SEEDS:
        rows = case30_runs[seed][0.035].report.rows
        agg = case30_runs[seed][0.035].report.aggregates
        assert agg["avg_speedup"] == pytest.approx(np.mean([r.time_solver / r.time_dnn for r in rows]), rel=1e-12)
        speed.append(agg["avg_speedup"])
    report_detail("case30 c=3.5% mean per-instance speedup " + ", ".join(f"x{s:.1f}" for s in speed))
    assert min(speed) >= 10


# -- 8 --------------------------------------------------------------------------------


@pytest.mark.criterion(8)
def test_criterion_8_projection_contract(report_detail):
    rng = np.random.default_rng(88)
    worst_identity = worst_idem = 0.0
    failures = 0
    for _ in range(100):
        net, load = random_network(rng)
        prob = DcOpfProblem(net, load)
        adm = build_admittance(net)
        p_opt = solve_dcopf(prob, adm=adm).p_g
        worst_identity = max(worst_identity, np.abs(l1_project(prob, p_opt, adm=adm).p_g - p_opt).max())
        p_hat = p_opt + rng.normal(0, 0.3, net.n_gen) * (net.p_max - net.p_min)
        while is_feasible(net, adm, prob.limits, p_hat, load):
            p_hat = p_hat + rng.normal(0, 0.3, net.n_gen) * (net.p_max - net.p_min)
        once = l1_project(prob, p_hat, adm=adm)
        twice = l1_project(prob, once.p_g, adm=adm)
        worst_idem = max(worst_idem, np.abs(twice.p_g - once.p_g).max())
        theta = reconstruct_angles(adm, once.p_g, load)
        ok, _ = check_feasibility(net, once.p_g, theta, load=load, adm=adm)
        ok &= bool(np.all(np.abs(flows_oracle(net, once.p_g, load)) <= net.capacity * (1 + 1e-6)))
        failures += not (once.optimal and ok)
    report_detail(f"identity gap {worst_identity:.1e} MW, idempotence gap {worst_idem:.1e} MW, "
                  f"{failures} re-check failures")
    assert worst_identity <= 1e-8 and worst_idem <= 1e-8 and failures == 0


# -- 9 --------------------------------------------------------------------------------


@pytest.mark.criterion(9)
def test_criterion_9_oracle_model(case30, case118, report_detail):
    parts = []
    ok = True
    for net, regime, n in ((case30, "full", 200), (case30, "light", 50), (case30, "heavy", 50),
                           (case118, "full", 20)):
        test = generate_split(net, None, n, "test", REGIMES[regime], seed=9, regime=regime)
        agg = evaluate(OracleModel(test, net), net, test, fallback="none").aggregates
        shown = f"{agg['optimality_loss']:.2f}".lstrip("-")
        ok &= agg["feasibility_rate"] == 100.0 and shown == "0.00"
        parts.append(f"{net.name}/{regime}: {agg['feasibility_rate']:.2f}% feasible, loss {shown}%")
    # replaying calibrated training labels as predictions
    train = generate_split(case30, plan_from_percent(0.035), 100, "train", seed=9)
    agg = evaluate(OracleModel(train, case30), case30, train, fallback="none").aggregates
    ok &= agg["feasibility_rate"] == 100.0
    parts.append(f"case30 calibrated labels: {agg['feasibility_rate']:.2f}% feasible")
    report_detail("; ".join(parts))
    assert ok


def test_criterion_9_exercises_the_pipeline(case30):
    """The oracle goes through decode, angles and the check like any model."""
    test = generate_split(case30, None, 5, "test", seed=2)
    oracle = OracleModel(test, case30)
    adm = build_admittance(case30)
    for load in test.full_loads(case30):
        alpha = oracle.predict_alpha(load[case30.load_pos][None])[0]
        p = decode_generation(case30, alpha, load)
        ok, _ = check_feasibility(case30, p, reconstruct_angles(adm, p, load), Limits.original(case30), adm=adm)
        assert ok
