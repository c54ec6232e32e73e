"""Evaluation of trained models against the reference solver, and calibration sweeps."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields

from .calibration import plan_from_percent
from .dataset import REGIMES, TrainingDataset, generate_split
from .errors import PrevOpfError
from .grid import PowerNetwork, build_admittance
from .mlp import MlpModel, PenaltyOperator, TrainConfig, train
from .pipeline import Predictor
from .solver import DcOpfProblem, SolverOptions, solve_dcopf

log = logging.getLogger(__name__)


@dataclass
class InstanceRow:
    index: int
    feasible_direct: bool
    line_violation: bool
    generator_violation: bool
    projected: bool
    cost_dnn: float
    cost_ref: float
    time_dnn: float
    time_solver: float
    ratio: float


def aggregate(rows: list[InstanceRow]) -> dict:
    """Report aggregates; speedup and loss are means of per-instance ratios."""
    if not rows:
        return {"n": 0}
    n = len(rows)
    return {
        "n": n,
        "feasibility_rate": 100.0 * sum(r.feasible_direct for r in rows) / n,
        "line_feasibility_rate": 100.0 * sum(not r.line_violation for r in rows) / n,
        "generator_feasibility_rate": 100.0 * sum(not r.generator_violation for r in rows) / n,
        "avg_cost_dnn": sum(r.cost_dnn for r in rows) / n,
        "avg_cost_ref": sum(r.cost_ref for r in rows) / n,
        "optimality_loss": 100.0 * sum((r.cost_dnn - r.cost_ref) / r.cost_ref for r in rows) / n,
        "avg_time_dnn_ms": 1e3 * sum(r.time_dnn for r in rows) / n,
        "avg_time_solver_ms": 1e3 * sum(r.time_solver for r in rows) / n,
        "avg_speedup": sum(r.ratio for r in rows) / n,
        "projected": sum(r.projected for r in rows),
    }


@dataclass
class EvaluationReport:
    rows: list[InstanceRow]
    config: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> dict:
        return aggregate(self.rows)

    def write_csv(self, path) -> None:
        names = [f.name for f in fields(InstanceRow)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.rows:
                w.writerow([_fmt(getattr(r, k)) for k in names])

    @staticmethod
    def read_csv(path) -> list[InstanceRow]:
        types = {f.name: f.type for f in fields(InstanceRow)}
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                kw = {}
                for k, v in rec.items():
                    t = types[k]
                    kw[k] = int(v) if t == "int" else (v == "1") if t == "bool" else float(v)
                rows.append(InstanceRow(**kw))
        return rows

    def to_markdown(self) -> str:
        return table_markdown([(self.config, self.aggregates)])


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    return repr(v) if isinstance(v, float) else str(v)


_HEADER = (
    "| Case | Limit calibration (%) | Regime | Feasibility rate (%) | Feasibility rate without calibration (%) "
    "| Avg cost DNN ($/h) | Avg cost Ref ($/h) | Loss (%) | DNN time (ms) | Ref time (ms) | Avg speedup |\n"
    "|---|---|---|---|---|---|---|---|---|---|---|"
)


def table_markdown(entries, uncalibrated_rate: float | None = None) -> str:
    lines = [_HEADER]
    for cfg, agg in entries:
        if not agg.get("n"):
            lines.append(f"| {cfg.get('case', '')} | {cfg.get('calibration', '')} | {cfg.get('regime', '')} "
                         f"| failed: {cfg.get('error', 'no instances')} | | | | | | | |")
            continue
        uncal = "" if uncalibrated_rate is None else f"{uncalibrated_rate:.2f}"
        lines.append(
            f"| {cfg.get('case', '')} | {cfg.get('calibration', '')} | {cfg.get('regime', '')} "
            f"| {agg['feasibility_rate']:.2f} | {uncal} "
            f"| {agg['avg_cost_dnn']:.1f} | {agg['avg_cost_ref']:.1f} | {agg['optimality_loss']:.2f} "
            f"| {agg['avg_time_dnn_ms']:.3f} | {agg['avg_time_solver_ms']:.3f} | x{agg['avg_speedup']:.0f} |"
        )
    return "\n".join(lines) + "\n"


def evaluate(
    model,
    net: PowerNetwork,
    test: TrainingDataset,
    fallback: str = "l1-projection",
    opts: SolverOptions = SolverOptions(),
    config: dict | None = None,
) -> EvaluationReport:
    """Predict every test instance and re-solve it cold under original limits.

    Timings run serially in this process.
    """
    test.check_network(net)
    adm = build_admittance(net)
    pred = Predictor(model, net, adm, opts)
    loads = test.full_loads(net)
    rows = []
    for i, load in enumerate(loads):
        res = pred.predict(load, fallback)
        ref = solve_dcopf(DcOpfProblem(net, load), opts, adm=adm)
        cost_ref = ref.cost if ref.optimal else float(test.cost[i])
        t_dnn = res.total_time
        rows.append(InstanceRow(
            index=int(test.sample_index[i]),
            feasible_direct=res.feasible_direct,
            line_violation=any(v.category == "line" for v in res.violations),
            generator_violation=any(v.category == "generator" for v in res.violations),
            projected=res.projected,
            cost_dnn=res.cost,
            cost_ref=cost_ref,
            time_dnn=t_dnn,
            time_solver=ref.solve_time,
            ratio=ref.solve_time / t_dnn,
        ))
    cfg = {"case": net.name, "regime": test.regime, "fallback": fallback, "n_test": len(test)}
    cfg.update(config or {})
    return EvaluationReport(rows, cfg)


def train_for_plan(net, train_set, config: TrainConfig, hidden=None, penalty_limits=None):
    """Fresh model + training on one dataset; the penalty uses the training limits."""
    from .calibration import apply_plan

    model = MlpModel.for_dataset(net, train_set, hidden, seed=config.seed)
    limits = penalty_limits or apply_plan(net, train_set.calibration)
    return train(model, train_set, config, PenaltyOperator(net, limits))


@dataclass
class SweepEntry:
    c: float
    report: EvaluationReport | None
    trace: list | None = None
    error: str | None = None


def run_sweep(
    net: PowerNetwork,
    calibrations,
    n_train: int,
    n_test: int,
    seed: int = 0,
    config: TrainConfig = TrainConfig(),
    hidden=None,
    regime: str = "full",
    fallback: str = "l1-projection",
    opts: SolverOptions = SolverOptions(),
    test: TrainingDataset | None = None,
    workers: int = 1,
) -> list[SweepEntry]:
    """Train and evaluate one model per calibration fraction.

    All entries share the training load seed and the test set. A failure for
    one c is recorded and the sweep moves on.
    """
    calibrations = list(calibrations)
    if not calibrations:
        raise ValueError("no calibration values given")
    if test is None:
        test = generate_split(net, None, n_test, "test", REGIMES[regime], seed, regime, opts, workers)
    out = []
    for c in calibrations:
        try:
            plan = plan_from_percent(c)
            train_set = generate_split(net, plan, n_train, "train", (1.0, 1.3), seed, "full", opts, workers)
            model, trace = train_for_plan(net, train_set, config, hidden)
            rep = evaluate(model, net, test, fallback, opts, {"calibration": f"{100 * c:g}", "seed": seed})
            out.append(SweepEntry(c, rep, trace))
        except (PrevOpfError, ValueError) as exc:
            log.warning("calibration %g failed: %s", c, exc)
            out.append(SweepEntry(c, None, error=str(exc)))
    return out


def sweep_markdown(entries: list[SweepEntry], case: str = "") -> str:
    uncal = next((e.report.aggregates["feasibility_rate"] for e in entries if e.c == 0 and e.report), None)
    rows = []
    for e in entries:
        if e.report is None:
            rows.append(({"case": case, "calibration": f"{100 * e.c:g}", "error": e.error}, {"n": 0}))
        else:
            rows.append((e.report.config, e.report.aggregates))
    return table_markdown(rows, uncal)


def write_sweep_csv(entries: list[SweepEntry], path) -> None:
    keys = ["n", "feasibility_rate", "line_feasibility_rate", "generator_feasibility_rate", "avg_cost_dnn",
            "avg_cost_ref", "optimality_loss", "avg_time_dnn_ms", "avg_time_solver_ms", "avg_speedup", "projected"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["calibration", *keys, "error"])
        for e in entries:
            agg = e.report.aggregates if e.report else {}
            w.writerow([repr(e.c), *[_fmt(agg.get(k, "")) for k in keys], e.error or ""])


def trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "L_PG", "L_pen", "total"])
        for epoch, l_pg, l_pen, total in trace:
            w.writerow([epoch, repr(float(l_pg)), repr(float(l_pen)), repr(float(total))])


def report_dict(rep: EvaluationReport) -> dict:
    return {"config": rep.config, "aggregates": rep.aggregates, "rows": [asdict(r) for r in rep.rows]}


def summary_line(agg: dict) -> str:
    return (f"feasibility {agg['feasibility_rate']:.2f}%  loss {agg['optimality_loss']:.3f}%  "
            f"speedup x{agg['avg_speedup']:.1f}")


__all__ = [
    "InstanceRow", "EvaluationReport", "aggregate", "evaluate", "run_sweep", "SweepEntry",
    "sweep_markdown", "write_sweep_csv", "trace_csv", "train_for_plan", "table_markdown",
]
