"""Load sampling, scaling-factor encoding and the on-disk dataset format.

A dataset file is::

    b"PVOPFDS1" | uint64 LE header length | JSON header | float64 LE records

Each record is ``[sample_index, loads at load buses..., alpha..., cost, slack_gen]``.
"""

from __future__ import annotations

import json
import logging
import struct
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import CalibrationPlan, apply_plan, plan_from_percent
from .errors import ArtifactFormatError, DatasetGenerationError, HashMismatchError
from .grid import PowerNetwork, build_admittance
from .solver import DcOpfProblem, Limits, SolverOptions, solve_dcopf

log = logging.getLogger(__name__)

MAGIC = b"PVOPFDS1"
FORMAT_VERSION = 1
REGIMES = {"full": (1.0, 1.3), "light": (0.9, 1.1), "heavy": (1.1, 1.3)}


@dataclass(frozen=True, eq=False)
class LoadSample:
    load: np.ndarray  # MW per bus
    regime: str
    index: int


def _load_stream(net: PowerNetwork, lo: float, hi: float, seed, regime: str):
    """Endless deterministic sequence of load samples."""
    rng = np.random.default_rng(seed)
    pos = net.load_pos
    base = net.load[pos]
    i = 0
    while True:
        factors = rng.uniform(lo, hi, size=len(pos))
        load = np.zeros(net.n_bus)
        load[pos] = factors * base
        yield LoadSample(load, regime, i)
        i += 1


def sample_loads(net: PowerNetwork, load_range=(1.0, 1.3), n: int = 1, seed=0, regime: str = "full"):
    """Independent uniform draws in ``[lo, hi]`` times each bus's default load.

    Buses with zero default load stay at zero.
    """
    lo, hi = load_range
    if not 0 < lo <= hi:
        raise ValueError(f"invalid load range {load_range}")
    if n <= 0:
        raise ValueError("n must be positive")
    stream = _load_stream(net, lo, hi, seed, regime)
    return [next(stream) for _ in range(n)]


def encode_alpha(net: PowerNetwork, p_g, tol: float = 1e-6) -> np.ndarray:
    """Scaling factors of the predicted generators for a dispatch in MW."""
    p = np.asarray(p_g, dtype=float)[net.predicted_gens]
    lo, hi = net.p_min[net.predicted_gens], net.p_max[net.predicted_gens]
    if np.any(p < lo - tol) or np.any(p > hi + tol):
        warnings.warn("dispatch outside generator bounds; clamping", RuntimeWarning, stacklevel=2)
    return np.clip((p - lo) / (hi - lo), 0.0, 1.0)


def decode_alpha(net: PowerNetwork, alpha) -> np.ndarray:
    """Outputs (MW) of the predicted generators for given scaling factors."""
    g = net.predicted_gens
    lo, hi = net.p_min[g], net.p_max[g]
    return np.asarray(alpha, dtype=float) * (hi - lo) + lo


@dataclass(eq=False)
class TrainingDataset:
    """Column-oriented dataset bound to one network.

    ``loads`` holds MW at the network's load buses (``net.load_pos``).
    """

    loads: np.ndarray
    alpha: np.ndarray
    cost: np.ndarray
    slack_gen: np.ndarray
    sample_index: np.ndarray
    calibration: CalibrationPlan
    network_id: str
    split: str
    regime: str = "full"
    load_range: tuple[float, float] = (1.0, 1.3)
    seed: int = 0
    discarded: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.cost)

    @property
    def network_hash(self) -> str:
        return self.network_id.rsplit(":", 1)[-1]

    def full_loads(self, net: PowerNetwork) -> np.ndarray:
        out = np.zeros((len(self), net.n_bus))
        out[:, net.load_pos] = self.loads
        return out

    def sample(self, net: PowerNetwork, i: int) -> LoadSample:
        load = np.zeros(net.n_bus)
        load[net.load_pos] = self.loads[i]
        return LoadSample(load, self.regime, int(self.sample_index[i]))

    def check_network(self, net: PowerNetwork):
        if self.network_hash != net.digest:
            raise HashMismatchError(
                f"dataset was generated for network {self.network_id}, not {net.network_id}"
            )

    # -- io ----------------------------------------------------------------

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "network_id": self.network_id,
            "split": self.split,
            "regime": self.regime,
            "load_range": list(self.load_range),
            "seed": self.seed,
            "discarded": self.discarded,
            "calibration": self.calibration.to_dict(),
            "n_records": len(self),
            "columns": {
                "sample_index": 1,
                "loads": self.loads.shape[1],
                "alpha": self.alpha.shape[1],
                "cost": 1,
                "slack_gen": 1,
            },
            "meta": self.meta,
        }

    def to_bytes(self) -> bytes:
        hdr = json.dumps(self.header(), sort_keys=True).encode()
        rec = np.hstack([
            self.sample_index.reshape(-1, 1).astype(float),
            self.loads,
            self.alpha,
            self.cost.reshape(-1, 1),
            self.slack_gen.reshape(-1, 1),
        ]).astype("<f8")
        return MAGIC + struct.pack("<Q", len(hdr)) + hdr + rec.tobytes()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "TrainingDataset":
        if raw[:8] != MAGIC:
            raise ArtifactFormatError("not a dataset file (bad magic)")
        try:
            (n_hdr,) = struct.unpack("<Q", raw[8:16])
            hdr = json.loads(raw[16:16 + n_hdr])
        except (struct.error, ValueError) as exc:
            raise ArtifactFormatError(f"corrupted dataset header: {exc}") from None
        if hdr.get("format_version") != FORMAT_VERSION:
            raise ArtifactFormatError(f"unsupported dataset version {hdr.get('format_version')}")
        cols = hdr["columns"]
        width = cols["sample_index"] + cols["loads"] + cols["alpha"] + cols["cost"] + cols["slack_gen"]
        body = raw[16 + n_hdr:]
        if len(body) != 8 * width * hdr["n_records"]:
            raise ArtifactFormatError("dataset body length does not match header")
        rec = np.frombuffer(body, dtype="<f8").reshape(hdr["n_records"], width).astype(float)
        nl, na = cols["loads"], cols["alpha"]
        return cls(
            loads=rec[:, 1:1 + nl].copy(),
            alpha=rec[:, 1 + nl:1 + nl + na].copy(),
            cost=rec[:, 1 + nl + na].copy(),
            slack_gen=rec[:, 2 + nl + na].copy(),
            sample_index=rec[:, 0].astype(int),
            calibration=CalibrationPlan.from_dict(hdr["calibration"]),
            network_id=hdr["network_id"],
            split=hdr["split"],
            regime=hdr["regime"],
            load_range=tuple(hdr["load_range"]),
            seed=hdr["seed"],
            discarded=hdr["discarded"],
            meta=hdr.get("meta", {}),
        )

    @classmethod
    def load(cls, path) -> "TrainingDataset":
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise ArtifactFormatError(f"cannot read {path}: {exc.strerror}") from None
        return cls.from_bytes(raw)


# -- generation ----------------------------------------------------------------


def _solve_one(args):
    net, load, limits, opts = args
    sol = solve_dcopf(DcOpfProblem(net, load, limits), opts)
    return sol.optimal, sol.p_g, sol.cost


def _label(net, limits, opts, stream, n, split, workers, batch=256, max_discard=0.5):
    """Solve instances from ``stream`` until ``n`` have an optimal solution."""
    adm = build_admittance(net)
    kept: list[tuple[LoadSample, np.ndarray, float]] = []
    attempts = discarded = 0
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        while len(kept) < n:
            pending = [next(stream) for _ in range(min(batch, n - len(kept)))]
            if pool is None:
                results = []
                for s in pending:
                    sol = solve_dcopf(DcOpfProblem(net, s.load, limits), opts, adm=adm)
                    results.append((sol.optimal, sol.p_g, sol.cost))
            else:
                results = list(pool.map(_solve_one, [(net, s.load, limits, opts) for s in pending]))
            for s, (ok, p_g, cost) in zip(pending, results):
                attempts += 1
                if ok:
                    kept.append((s, p_g, cost))
                else:
                    discarded += 1
            if attempts >= 20 and discarded > max_discard * attempts:
                raise DatasetGenerationError(
                    f"{split}: {discarded} of {attempts} sampled instances infeasible; "
                    "calibration too aggressive for the sampled load range"
                )
    finally:
        if pool is not None:
            pool.shutdown()
    if discarded:
        log.info("%s: discarded %d infeasible samples", split, discarded)
    return kept[:n], discarded


def _pack(net, kept, plan, split, regime, load_range, seed, discarded, limits_kind):
    n_out = len(net.predicted_gens)
    if kept:
        loads = np.array([s.load[net.load_pos] for s, _, _ in kept])
        alpha = np.array([encode_alpha(net, p) for _, p, _ in kept]).reshape(len(kept), n_out)
        cost = np.array([c for _, _, c in kept])
        slack = np.array([p[net.slack_gen] for _, p, _ in kept])
        idx = np.array([s.index for s, _, _ in kept])
    else:
        loads = np.zeros((0, len(net.load_pos)))
        alpha = np.zeros((0, n_out))
        cost = slack = np.zeros(0)
        idx = np.zeros(0, dtype=int)
    return TrainingDataset(
        loads=loads, alpha=alpha, cost=cost, slack_gen=slack, sample_index=idx,
        calibration=plan, network_id=net.network_id, split=split, regime=regime,
        load_range=tuple(load_range), seed=seed, discarded=discarded,
        meta={"limits": limits_kind},
    )


def generate_split(
    net: PowerNetwork,
    plan: CalibrationPlan | None,
    n: int,
    split: str,
    load_range=(1.0, 1.3),
    seed: int = 0,
    regime: str = "full",
    opts: SolverOptions = SolverOptions(),
    workers: int = 1,
) -> TrainingDataset:
    """One split. ``train`` is solved under calibrated limits, ``test`` under original ones."""
    plan = plan or plan_from_percent(0.0)
    lo, hi = load_range
    if not 0 < lo <= hi:
        raise ValueError(f"invalid load range {load_range}")
    train_seq, test_seq = np.random.SeedSequence(seed).spawn(2)
    if split == "train":
        limits, kind, seq = apply_plan(net, plan), "calibrated", train_seq
    elif split == "test":
        limits, kind, seq = Limits.original(net), "original", test_seq
    else:
        raise ValueError(f"unknown split {split!r}")
    stream = _load_stream(net, lo, hi, seq, regime)
    kept, discarded = _label(net, limits, opts, stream, n, split, workers) if n > 0 else ([], 0)
    return _pack(net, kept, plan, split, regime, load_range, seed, discarded, kind)


def generate_dataset(
    net: PowerNetwork,
    plan: CalibrationPlan | None,
    n_train: int,
    n_test: int,
    load_range=(1.0, 1.3),
    seed: int = 0,
    regime: str = "full",
    opts: SolverOptions = SolverOptions(),
    workers: int = 1,
) -> tuple[TrainingDataset, TrainingDataset]:
    """Train split under calibrated limits plus a test split with original-limit optima."""
    train = generate_split(net, plan, n_train, "train", load_range, seed, regime, opts, workers)
    test = generate_split(net, plan, n_test, "test", load_range, seed, regime, opts, workers)
    return train, test
