import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from oracles import brute_force_dispatch, chain_forward as _chain, composite_loss as _composite_loss, \
    fd_check as _fd_check, random_network
from prevopf.calibration import apply_plan, plan_from_percent
from prevopf.dataset import TrainingDataset, encode_alpha, generate_split
from prevopf.errors import ArtifactFormatError, HashMismatchError, TrainingDivergedError, ValidationError
from prevopf.grid import Branch, Bus, Generator, PowerNetwork, build_admittance
from prevopf.mlp import (
    MlpModel,
    PenaltyOperator,
    TrainConfig,
    default_hidden,
    load_model,
    loss,
    loss_and_grad,
    momentum_step,
    save_model,
    train,
)
from prevopf.pipeline import decode_generation, reconstruct_angles
from prevopf.solver import Limits

seeds = st.integers(0, 2**32 - 1)


@pytest.fixture(scope="module")
def case30_train(case30):
    return generate_split(case30, plan_from_percent(0.035), 300, "train", seed=2)


# -- forward ------------------------------------------------------------------------


def test_zero_model_outputs_half():
    m = MlpModel.initialize((4, 3, 2), seed=0)
    for w in m.weights:
        w[:] = 0.0
    np.testing.assert_array_equal(m.forward(np.random.default_rng(0).normal(size=(5, 4))), 0.5)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_outputs_inside_unit_interval(seed):
    rng = np.random.default_rng(seed)
    m = MlpModel.initialize((6, 8, 4, 3), seed=seed)
    out = m.forward(rng.uniform(-10, 10, size=(20, 6)))
    assert np.all((out > 0) & (out < 1))


def test_forward_matches_second_implementation():
    rng = np.random.default_rng(4)
    m = MlpModel.initialize((5, 7, 6, 3), seed=9)
    for b in m.biases:
        b[:] = rng.normal(size=b.shape)
    x = rng.normal(size=(10, 5))
    np.testing.assert_allclose(m.forward(x), _chain(m, x), rtol=0, atol=1e-12)


def test_forward_checks_width():
    with pytest.raises(ValueError, match="features"):
        MlpModel.initialize((5, 3, 2)).forward(np.zeros((1, 4)))


def test_shapes_validated():
    m = MlpModel.initialize((3, 2, 1))
    with pytest.raises(ValueError):
        MlpModel((3, 2, 1), m.weights[:1], m.biases[:1], m.in_mean, m.in_scale)
    with pytest.raises(ValueError):
        MlpModel((3, 4, 1), m.weights, m.biases, m.in_mean, m.in_scale)


def test_glorot_initialization_range():
    m = MlpModel.initialize((30, 20, 10), seed=1)
    assert np.abs(m.weights[0]).max() <= np.sqrt(6 / 50)
    assert np.abs(m.weights[1]).max() <= np.sqrt(6 / 30)
    assert all(np.all(b == 0) for b in m.biases)


def test_table_architectures(case30, case118):
    assert default_hidden(case30) == (32, 16, 8)
    assert default_hidden(case118) == (128, 64, 32)


# -- loss -------------------------------------------------------------------------------


def test_perfect_prediction_has_zero_loss(case30, case30_train):
    m = MlpModel.for_dataset(case30, case30_train)
    orig = Limits.original(case30)
    pen = PenaltyOperator(case30, Limits(orig.p_min, orig.p_max, 10 * orig.line_cap))
    x = m.normalize(case30_train.loads[:10])
    target = m.forward(x)
    flows = pen.flows(target, case30_train.loads[:10])
    assert np.all(np.abs(flows) < 1)
    total, l_pg, l_pen = loss(m, x, target, case30_train.loads[:10], pen)
    assert (total, l_pg, l_pen) == (0.0, 0.0, 0.0)


def test_boundary_flow_not_penalized():
    # one line, flow equals capacity exactly
    net = PowerNetwork(
        buses=[Bus(1, 0.0), Bus(2, 50.0)],
        generators=[Generator(1, 0, 100, 0.1, 1, 0), Generator(2, 0, 100, 0.1, 1, 0)],
        branches=[Branch(1, 2, 0.5, 50.0)],
        slack_bus=1,
    )
    pen = PenaltyOperator(net)
    f = pen.flows(np.array([[0.0]]), np.array([[50.0]]))
    assert abs(f[0, 0]) == 1.0
    m = MlpModel.initialize((1, 2, 1))
    _, _, l_pen, _ = loss_and_grad(m, np.zeros((1, 1)), np.zeros((1, 1)), np.array([[50.0]]), pen)
    f_model = pen.flows(m.forward(np.zeros((1, 1))), np.array([[50.0]]))
    assert l_pen == pytest.approx(np.maximum(f_model**2 - 1, 0).mean())


def test_penalty_flows_match_angle_reconstruction(case30, case30_train):
    limits = apply_plan(case30, case30_train.calibration)
    pen = PenaltyOperator(case30, limits)
    adm = build_admittance(case30)
    rng = np.random.default_rng(0)
    alpha = rng.random((20, len(case30.predicted_gens)))
    for a, ld in zip(alpha, case30_train.loads[:20]):
        full = np.zeros(case30.n_bus)
        full[case30.load_pos] = ld
        theta = reconstruct_angles(adm, decode_generation(case30, a, full), full)
        np.testing.assert_allclose(pen.flows(a[None], ld[None])[0], pen.a_matrix @ theta, atol=1e-10)
        np.testing.assert_allclose(pen.a_matrix @ theta,
                                   adm.x_incidence @ theta * case30.base_mva / limits.line_cap, atol=1e-12)


@settings(max_examples=8, deadline=None)
@given(seeds)
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net, load = random_network(rng, n_bus=int(rng.integers(3, 7)), n_gen=3, tight=True)
    limits = apply_plan(net, plan_from_percent(0.3)) if net.capacity.min() > 1 else None
    pen = PenaltyOperator(net, limits)
    n_in, n_out = len(net.load_pos), len(net.predicted_gens)
    model = MlpModel.initialize((n_in, 5, 4, n_out), seed=seed)
    for b in model.biases:
        b[:] = rng.normal(0, 0.5, size=b.shape)
    loads = load[net.load_pos] * rng.uniform(0.8, 1.6, size=(6, n_in))
    x = rng.normal(size=(6, n_in))
    alpha = rng.random((6, n_out))
    w1, w2 = rng.uniform(0.5, 2.0, 2)
    lim = limits or apply_plan(net, plan_from_percent(0.0))

    def fn(numeric):
        if numeric:
            return _composite_loss(model, net, lim, x, alpha, loads, w1, w2)
        return loss_and_grad(model, x, alpha, loads, pen, w1, w2)

    total = loss(model, x, alpha, loads, pen, w1, w2)[0]
    assert total == pytest.approx(_composite_loss(model, net, lim, x, alpha, loads, w1, w2), rel=1e-10)
    assert _fd_check(model, fn) < 1e-4


def test_penalty_gradient_only_through_violated_lines(case30, case30_train):
    m = MlpModel.for_dataset(case30, case30_train, seed=3)
    orig = Limits.original(case30)
    x = m.normalize(case30_train.loads[:8])
    loads = case30_train.loads[:8]
    alpha = case30_train.alpha[:8]
    loose = PenaltyOperator(case30, Limits(orig.p_min, orig.p_max, 10 * orig.line_cap))
    assert np.all(np.abs(loose.flows(m.forward(x), loads)) < 1)
    _, _, l_pen, g_both = loss_and_grad(m, x, alpha, loads, loose)
    _, _, _, g_none = loss_and_grad(m, x, alpha, loads, None)
    assert l_pen == 0.0
    assert all(np.array_equal(a, b) for a, b in zip(g_both, g_none))
    # with the real limits only violated lines contribute
    tight = PenaltyOperator(case30, orig)
    f = tight.flows(m.forward(x), loads)
    viol = np.abs(f) > 1
    assert viol.any()
    _, _, l_pen, _ = loss_and_grad(m, x, alpha, loads, tight)
    assert l_pen == pytest.approx(np.sum(np.where(viol, f * f - 1, 0)) / f.size)


# -- optimizer and training -------------------------------------------------------------


def test_momentum_recursion_bit_exact():
    p = [np.array([1.5]), np.array([[-0.25]])]
    v = [np.array([0.1]), np.array([[0.2]])]
    g = [np.array([0.3]), np.array([[-0.7]])]
    lr, mu = 0.01, 0.9
    expected_v = [mu * 0.1 - lr * 0.3, mu * 0.2 - lr * -0.7]
    expected_p = [1.5 + expected_v[0], -0.25 + expected_v[1]]
    momentum_step(p, v, g, lr, mu)
    assert v[0][0] == expected_v[0] and v[1][0, 0] == expected_v[1]
    assert p[0][0] == expected_p[0] and p[1][0, 0] == expected_p[1]


def test_zero_learning_rate_leaves_weights(case30, case30_train):
    one = TrainingDataset(
        case30_train.loads[:1], case30_train.alpha[:1], case30_train.cost[:1], case30_train.slack_gen[:1],
        case30_train.sample_index[:1], case30_train.calibration, case30_train.network_id, "train",
    )
    m = MlpModel.for_dataset(case30, one)
    out, trace = train(m, one, TrainConfig(epochs=1, lr=0.0), PenaltyOperator(case30))
    assert all(np.array_equal(a, b) for a, b in zip(out.params, m.params))
    assert [t[0] for t in trace] == [0, 1]


def test_zero_epochs_keeps_initialization(case30, case30_train):
    m = MlpModel.for_dataset(case30, case30_train, seed=5)
    out, trace = train(m, case30_train, TrainConfig(epochs=0))
    assert all(np.array_equal(a, b) for a, b in zip(out.params, m.params))
    assert len(trace) == 1


def _two_bus_family(n=200, seed=0):
    """Two-bus network with a generator at each end; labels from grid search."""
    net = PowerNetwork(
        buses=[Bus(1, 0.0), Bus(2, 60.0)],
        generators=[Generator(1, 0, 120, 0.02, 10, 0), Generator(2, 0, 100, 0.05, 12, 0)],
        branches=[Branch(1, 2, 0.2, 200.0)],
        slack_bus=1,
        name="two_bus_family",
    )
    rng = np.random.default_rng(seed)
    loads = rng.uniform(40.0, 100.0, size=(n, 1))
    alpha, cost, slack = [], [], []
    for ld in loads:
        p, c = brute_force_dispatch(net, np.array([0.0, ld[0]]))
        alpha.append(encode_alpha(net, p))
        cost.append(c)
        slack.append(p[0])
    ds = TrainingDataset(loads, np.array(alpha), np.array(cost), np.array(slack), np.arange(n),
                         plan_from_percent(0.0), net.network_id, "train")
    return net, ds


def test_training_fits_linear_family():
    net, ds = _two_bus_family()
    m = MlpModel.for_dataset(net, ds, hidden=(8, 8), seed=0)
    out, trace = train(m, ds, TrainConfig(epochs=200, lr=0.05, batch_size=16), PenaltyOperator(net))
    assert trace[-1][1] <= trace[0][1] / 100


def test_training_reduces_loss_on_case30(case30, case30_train):
    m = MlpModel.for_dataset(case30, case30_train, seed=1)
    pen = PenaltyOperator(case30, apply_plan(case30, case30_train.calibration))
    _, trace = train(m, case30_train, TrainConfig(epochs=30, lr=0.05), pen)
    l_pg = np.array([t[1] for t in trace])
    smoothed = np.convolve(l_pg[1:], np.ones(5) / 5, mode="valid")
    assert smoothed[-1] < 0.5 * l_pg[0]


def test_training_deterministic(case30, case30_train):
    m = MlpModel.for_dataset(case30, case30_train, seed=1)
    cfg = TrainConfig(epochs=3, lr=0.05, seed=4)
    a, _ = train(m, case30_train, cfg, PenaltyOperator(case30))
    b, _ = train(m, case30_train, cfg, PenaltyOperator(case30))
    assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected(case30, case30_train):
    m = MlpModel.for_dataset(case30, case30_train, seed=1)
    alpha = case30_train.alpha.copy()
    alpha[7, 0] = np.inf
    bad = TrainingDataset(case30_train.loads, alpha, case30_train.cost, case30_train.slack_gen,
                          case30_train.sample_index, case30_train.calibration, case30_train.network_id, "train")
    with pytest.raises(TrainingDivergedError, match="learning rate"):
        train(m, bad, TrainConfig(epochs=1, lr=0.01), PenaltyOperator(case30))


def test_huge_learning_rate_never_leaves_non_finite_weights(case30, case30_train):
    m = MlpModel.for_dataset(case30, case30_train, seed=1)
    try:
        out, trace = train(m, case30_train, TrainConfig(epochs=20, lr=1e6, momentum=0.99), PenaltyOperator(case30))
    except TrainingDivergedError:
        return
    assert all(np.all(np.isfinite(p)) for p in out.params)
    assert all(np.isfinite(t[3]) for t in trace)


def test_training_refuses_mismatches(case30, case30_train):
    net, ds = _two_bus_family(10)
    m = MlpModel.for_dataset(case30, case30_train)
    with pytest.raises(HashMismatchError):
        train(m, ds, TrainConfig(epochs=1))
    wrong = MlpModel.initialize((3, 4, len(case30.predicted_gens)), network_hash=case30.digest)
    with pytest.raises(ValidationError, match="dims"):
        train(wrong, case30_train, TrainConfig(epochs=1))


@pytest.mark.parametrize(
    "kw", [{"epochs": -1}, {"batch_size": 0}, {"lr": -1.0}, {"momentum": 1.0}, {"w1": -1.0}]
)
def test_config_validated(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# -- persistence ------------------------------------------------------------------------


def test_save_load_bit_identical(case30, case30_train, tmp_path):
    m, _ = train(MlpModel.for_dataset(case30, case30_train), case30_train, TrainConfig(epochs=2, lr=0.05))
    path = tmp_path / "m.model"
    save_model(m, path)
    back = load_model(path, case30.digest)
    x = np.random.default_rng(0).normal(size=(100, m.layer_dims[0]))
    assert np.array_equal(back.forward(x), m.forward(x))
    assert back.layer_dims == m.layer_dims
    assert back.architecture_tag == "case30:32/16/8"
    assert back.train_config["epochs"] == 2


def test_corrupted_model_file(case30, case30_train, tmp_path):
    path = tmp_path / "m.model"
    save_model(MlpModel.for_dataset(case30, case30_train), path)
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ArtifactFormatError, match="checksum"):
        load_model(path)
    path.write_bytes(b"garbage")
    with pytest.raises(ArtifactFormatError, match="magic"):
        load_model(path)


def test_model_refuses_other_network(case30, case30_train, tmp_path):
    path = tmp_path / "m.model"
    save_model(MlpModel.for_dataset(case30, case30_train), path)
    with pytest.raises(HashMismatchError):
        load_model(path, "0123456789abcdef")


def test_forward_unchanged_by_expit_reference():
    m = MlpModel.initialize((2, 3, 1), seed=0)
    x = np.array([[0.3, -0.2]])
    h = np.maximum(x @ m.weights[0] + m.biases[0], 0)
    assert m.forward(x)[0, 0] == expit(h @ m.weights[1] + m.biases[1])[0]
