"""Feed-forward load → scaling-factor network trained with SGD + momentum.

Hidden layers use ReLU, the output a sigmoid. Gradients are hand-derived;
the line penalty is differentiated through the linear map from predicted
generations to normalized branch flows.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .calibration import compute_sensitivity
from .errors import ArtifactFormatError, HashMismatchError, TrainingDivergedError, ValidationError
from .grid import PowerNetwork, build_admittance
from .solver import Limits

MAGIC = b"PVOPFNN1"
FORMAT_VERSION = 1

# hidden sizes per case, three hidden layers each
ARCHITECTURES = {
    "case30": (32, 16, 8),
    "case118": (128, 64, 32),
    "case200": (128, 64, 32),
    "case300": (256, 128, 64),
}


def default_hidden(net: PowerNetwork) -> tuple[int, ...]:
    if net.name in ARCHITECTURES:
        return ARCHITECTURES[net.name]
    if net.n_bus <= 60:
        return ARCHITECTURES["case30"]
    if net.n_bus <= 250:
        return ARCHITECTURES["case118"]
    return ARCHITECTURES["case300"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    momentum: float = 0.9
    w1: float = 1.0
    w2: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr must be >= 0 and momentum in [0, 1)")
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("loss weights must be non-negative")


class PenaltyOperator:
    """Normalized branch flows as an affine function of predicted scaling factors.

    ``a_matrix`` has rows ±1/(cap·x) at the branch end buses, so that
    ``|a_matrix @ theta| <= 1`` iff the branch is within capacity. Composing it
    with the angle reconstruction (slack by balance) gives
    ``flows = alpha @ alpha_map.T + offset(loads)``.
    """

    def __init__(self, net: PowerNetwork, limits: Limits | None = None):
        limits = limits or Limits.original(net)
        adm = build_admittance(net)
        cap = limits.line_cap
        cap_pu = cap / net.base_mva
        self.a_matrix = adm.x_incidence / cap_pu[:, None]
        sens = compute_sensitivity(adm)
        phi = sens.m / cap[:, None]  # MW injection -> normalized flow
        col = {int(b): j for j, b in enumerate(adm.non_slack_pos)}

        def columns(bus_positions):
            out = np.zeros((net.n_branch, len(bus_positions)))
            for i, b in enumerate(bus_positions):
                if int(b) in col:
                    out[:, i] = phi[:, col[int(b)]]
            return out

        g = net.predicted_gens
        self.alpha_map = columns(net.gen_pos[g]) * (net.p_max[g] - net.p_min[g])
        base_inj = np.zeros(net.n_gen)
        base_inj[g] = net.p_min[g]
        base_inj[net.fixed_gens] = net.p_min[net.fixed_gens]
        self.const = columns(net.gen_pos) @ base_inj
        self.load_map = -columns(net.load_pos)
        self.n_lines = net.n_branch

    def flows(self, alpha: np.ndarray, loads: np.ndarray) -> np.ndarray:
        """Normalized flows for a batch; ``loads`` are MW at load buses."""
        return alpha @ self.alpha_map.T + loads @ self.load_map.T + self.const


@dataclass(eq=False)
class MlpModel:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    in_mean: np.ndarray
    in_scale: np.ndarray
    architecture_tag: str = ""
    network_hash: str = ""
    train_config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match layer_dims")
        for (i, o), w, b in zip(zip(self.layer_dims[:-1], self.layer_dims[1:]), self.weights, self.biases):
            if w.shape != (i, o) or b.shape != (o,):
                raise ValueError(f"parameter shapes {w.shape}/{b.shape} do not match layer {i}->{o}")

    @classmethod
    def initialize(cls, layer_dims, seed=0, in_mean=None, in_scale=None, **kw) -> "MlpModel":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        n_in = layer_dims[0]
        in_mean = np.zeros(n_in) if in_mean is None else np.asarray(in_mean, dtype=float)
        in_scale = np.ones(n_in) if in_scale is None else np.asarray(in_scale, dtype=float)
        return cls(tuple(layer_dims), weights, biases, in_mean, in_scale, **kw)

    @classmethod
    def for_dataset(cls, net: PowerNetwork, dataset, hidden=None, seed=0) -> "MlpModel":
        hidden = tuple(hidden) if hidden else default_hidden(net)
        dims = (dataset.loads.shape[1], *hidden, dataset.alpha.shape[1])
        if dims[0] != len(net.load_pos) or dims[-1] != len(net.predicted_gens):
            raise ValidationError("dataset dimensions do not match the network")
        mean = dataset.loads.mean(axis=0) if len(dataset) else np.zeros(dims[0])
        std = dataset.loads.std(axis=0) if len(dataset) else np.ones(dims[0])
        std = np.where(std > 1e-12, std, 1.0)
        tag = f"{net.name}:{'/'.join(str(h) for h in hidden)}"
        return cls.initialize(dims, seed, mean, std, architecture_tag=tag, network_hash=net.digest)

    @property
    def params(self) -> list[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.layer_dims,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.in_mean.copy(),
            self.in_scale.copy(),
            self.architecture_tag,
            self.network_hash,
            dict(self.train_config),
        )

    def normalize(self, loads) -> np.ndarray:
        return (np.asarray(loads, dtype=float) - self.in_mean) / self.in_scale

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.layer_dims[0]:
            raise ValueError(f"input has {x.shape[-1]} features, model expects {self.layer_dims[0]}")
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        return expit(h @ self.weights[-1] + self.biases[-1])

    def predict_alpha(self, loads) -> np.ndarray:
        return self.forward(self.normalize(loads))


# -- loss ------------------------------------------------------------------------


def loss_and_grad(model: MlpModel, x, alpha, loads, penalty: PenaltyOperator | None, w1=1.0, w2=1.0):
    """Composite loss on a batch and its gradient w.r.t. every parameter.

    Returns ``(total, l_pg, l_pen, grads)`` with ``grads`` ordered like
    ``model.params``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    acts = [x]
    pre = []
    h = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    out = expit(h @ model.weights[-1] + model.biases[-1])
    n_out = out.shape[1]

    diff = out - alpha
    l_pg = float(np.sum(diff * diff) / (n_out * n))
    g_out = 2.0 * diff / (n_out * n)

    l_pen = 0.0
    if penalty is not None and penalty.n_lines:
        f = penalty.flows(out, np.atleast_2d(loads))
        excess = f * f - 1.0
        viol = excess > 0
        l_pen = float(np.sum(np.where(viol, excess, 0.0)) / (penalty.n_lines * n))
        g_f = np.where(viol, 2.0 * f, 0.0) / (penalty.n_lines * n)
        g_out = w1 * g_out + w2 * (g_f @ penalty.alpha_map)
    else:
        g_out = w1 * g_out
    total = w1 * l_pg + w2 * l_pen

    delta = g_out * out * (1.0 - out)
    grads_w, grads_b = [], []
    for layer in range(len(model.weights) - 1, -1, -1):
        grads_w.append(acts[layer].T @ delta)
        grads_b.append(delta.sum(axis=0))
        if layer:
            delta = (delta @ model.weights[layer].T) * (pre[layer - 1] > 0)
    grads_w.reverse()
    grads_b.reverse()
    grads = [g for wb in zip(grads_w, grads_b) for g in wb]
    return total, l_pg, l_pen, grads


def loss(model, x, alpha, loads, penalty, w1=1.0, w2=1.0):
    total, l_pg, l_pen, _ = loss_and_grad(model, x, alpha, loads, penalty, w1, w2)
    return total, l_pg, l_pen


def momentum_step(params, velocity, grads, lr, mu):
    """In place: v ← μ·v − lr·g ; w ← w + v."""
    for p, v, g in zip(params, velocity, grads):
        v *= mu
        v -= lr * g
        p += v


# -- training --------------------------------------------------------------------


def train(model: MlpModel, dataset, config: TrainConfig = TrainConfig(), penalty: PenaltyOperator | None = None):
    """Train a copy of ``model``. Returns ``(trained, trace)``.

    ``trace`` rows are ``(epoch, L_PG, L_pen, total)``; epoch 0 is the
    untrained model on the full dataset, later rows average the minibatches.
    """
    if model.network_hash and dataset.network_hash != model.network_hash:
        raise HashMismatchError(
            f"dataset network {dataset.network_id} does not match model network {model.network_hash}"
        )
    if dataset.loads.shape[1] != model.layer_dims[0] or dataset.alpha.shape[1] != model.layer_dims[-1]:
        raise ValidationError(
            f"dataset dims ({dataset.loads.shape[1]}->{dataset.alpha.shape[1]}) do not match model "
            f"({model.layer_dims[0]}->{model.layer_dims[-1]})"
        )
    model = model.copy()
    model.train_config = asdict(config)
    n = len(dataset)
    trace = []
    if n == 0:
        return model, trace
    x_all = model.normalize(dataset.loads)
    y_all, l_all = dataset.alpha, dataset.loads
    total, l_pg, l_pen = loss(model, x_all, y_all, l_all, penalty, config.w1, config.w2)
    trace.append((0, l_pg, l_pen, total))

    rng = np.random.default_rng(config.seed)
    params = model.params
    velocity = [np.zeros_like(p) for p in params]
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            total, l_pg, l_pen, grads = loss_and_grad(
                model, x_all[idx], y_all[idx], l_all[idx], penalty, config.w1, config.w2
            )
            if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}; learning rate {config.lr} is probably too high"
                )
            momentum_step(params, velocity, grads, config.lr, config.momentum)
            sums += len(idx) * np.array([l_pg, l_pen, total])
        l_pg, l_pen, total = sums / n
        trace.append((epoch, float(l_pg), float(l_pen), float(total)))
    return model, trace


# -- io ------------------------------------------------------------------------------


def save_model(model: MlpModel, path) -> None:
    """Versioned header + little-endian float64 parameter blobs."""
    blobs = [model.in_mean, model.in_scale, *model.params]
    body = b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in blobs)
    header = {
        "format_version": FORMAT_VERSION,
        "layer_dims": list(model.layer_dims),
        "architecture_tag": model.architecture_tag,
        "network_hash": model.network_hash,
        "train_config": model.train_config,
        "blob_shapes": [list(b.shape) for b in blobs],
        "body_sha256": hashlib.sha256(body).hexdigest(),
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(hdr)) + hdr + body)


def load_model(path, network_hash: str | None = None) -> MlpModel:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactFormatError(f"cannot read {path}: {exc.strerror}") from None
    if raw[:8] != MAGIC:
        raise ArtifactFormatError("not a model file (bad magic)")
    try:
        (n_hdr,) = struct.unpack("<Q", raw[8:16])
        hdr = json.loads(raw[16:16 + n_hdr])
        version = hdr["format_version"]
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise ArtifactFormatError(f"corrupted model header: {exc}") from None
    if version != FORMAT_VERSION:
        raise ArtifactFormatError(f"unsupported model format version {version}")
    body = raw[16 + n_hdr:]
    if hashlib.sha256(body).hexdigest() != hdr["body_sha256"]:
        raise ArtifactFormatError("model weights are corrupted (checksum mismatch)")
    if network_hash is not None and hdr["network_hash"] != network_hash:
        raise HashMismatchError(
            f"model was trained for network {hdr['network_hash']}, not {network_hash}"
        )
    blobs, off = [], 0
    for shape in hdr["blob_shapes"]:
        size = int(np.prod(shape)) if shape else 1
        blobs.append(np.frombuffer(body, dtype="<f8", count=size, offset=off).astype(float).reshape(shape))
        off += 8 * size
    in_mean, in_scale, params = blobs[0], blobs[1], blobs[2:]
    return MlpModel(
        tuple(hdr["layer_dims"]),
        params[0::2],
        params[1::2],
        in_mean,
        in_scale,
        hdr["architecture_tag"],
        hdr["network_hash"],
        hdr["train_config"],
    )
