"""Command-line entry point: ``prevopf <verb> ...``.

Outputs go to ``--out``, else ``$PREVOPF_OUT``, else the working directory.
A TOML file passed with ``--config`` supplies defaults; top-level keys apply
to every verb and a ``[verb]`` table to that verb only. Explicit flags win.
Exit codes: 0 success, 2 usage, 3 invalid input, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import bench
from .calibration import (
    apply_plan,
    compute_sensitivity,
    plan_from_epsilon,
    plan_from_percent,
    worst_case_error_bound,
)
from .dataset import REGIMES, TrainingDataset, generate_split
from .errors import NumericalError, PrevOpfError
from .grid import build_admittance, parse_case
from .mlp import MlpModel, PenaltyOperator, TrainConfig, load_model, save_model, train
from .pipeline import FALLBACKS
from .solver import SolverOptions

OUT_ENV = "PREVOPF_OUT"
EXIT_USAGE, EXIT_INVALID, EXIT_NUMERICAL = 2, 3, 4

log = logging.getLogger("prevopf")


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _solver_opts(args) -> SolverOptions:
    return SolverOptions(
        tol_kkt=args.tol_kkt, tol_gap=args.tol_gap, max_iter=args.max_iter, verbosity=args.solver_verbosity
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, momentum=args.momentum,
        w1=args.w1, w2=args.w2, seed=args.seed,
    )


def _plan(args):
    if args.epsilon is not None:
        if args.calibration:
            raise UsageError("give either --calibration or --epsilon, not both")
        net = args.net
        sens = compute_sensitivity(build_admittance(net))
        return plan_from_epsilon(sens, net.n_gen, args.epsilon, net)
    return plan_from_percent(args.calibration / 100.0)


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# -- verbs -------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    net = args.net
    plan = _plan(args)
    apply_plan(net, plan)
    opts = _solver_opts(args)
    lo, hi = args.range
    test_range = REGIMES[args.test_regime] if args.test_regime else (lo, hi)
    out = _out_dir(args)
    stem = args.name or f"{net.name}_{plan.label.replace('%', 'pct').replace(' ', '')}_s{args.seed}"
    manifest = {"network_id": net.network_id, "calibration": plan.to_dict(),
                "uncalibrated": plan.is_zero, "seed": args.seed, "files": {}}
    for split, n, rng, regime in (("train", args.n_train, (lo, hi), "full"),
                                  ("test", args.n_test, test_range, args.test_regime or "full")):
        ds = generate_split(net, plan, n, split, rng, args.seed, regime, opts, args.workers)
        path = out / f"{stem}_{split}.ds"
        ds.save(path)
        manifest["files"][split] = {"path": path.name, "records": len(ds), "discarded": ds.discarded,
                                    "load_range": list(rng), "limits": ds.meta["limits"]}
        print(f"{split}: {len(ds)} records, {ds.discarded} discarded -> {path}")
    (out / f"{stem}_manifest.json").write_text(json.dumps(manifest, indent=2))
    return 0


def cmd_train(args) -> int:
    net = args.net
    ds = TrainingDataset.load(args.dataset)
    ds.check_network(net)
    config = _train_config(args)
    if args.init:
        model = load_model(args.init, net.digest)
    else:
        model = MlpModel.for_dataset(net, ds, _ints(args.hidden) if args.hidden else None, seed=args.seed)
    penalty = None if args.no_penalty else PenaltyOperator(net, apply_plan(net, ds.calibration))
    model, trace = train(model, ds, config, penalty)
    model.train_config["dataset_sha256"] = _sha(args.dataset)
    model.train_config["calibration"] = ds.calibration.label
    out = _out_dir(args)
    stem = args.name or Path(args.dataset).stem.removesuffix("_train")
    save_model(model, out / f"{stem}.model")
    bench.trace_csv(trace, out / f"{stem}_trace.csv")
    if trace:
        e, l_pg, l_pen, total = trace[-1]
        print(f"epoch {e}: L_PG {l_pg:.3e}  L_pen {l_pen:.3e}  total {total:.3e}")
    print(f"model -> {out / f'{stem}.model'}")
    return 0


def _test_set(args, net, opts):
    if args.test:
        ds = TrainingDataset.load(args.test)
        ds.check_network(net)
        return ds
    return generate_split(net, None, args.n_test, "test", REGIMES[args.regime], args.seed, args.regime,
                          opts, args.workers)


def cmd_eval(args) -> int:
    net = args.net
    opts = _solver_opts(args)
    model = load_model(args.model, net.digest)
    test = _test_set(args, net, opts)
    rep = bench.evaluate(model, net, test, args.fallback, opts,
                         {"model": Path(args.model).name, "seed": args.seed,
                          "calibration": model.train_config.get("calibration", "")})
    out = _out_dir(args)
    stem = args.name or f"{Path(args.model).stem}_{test.regime}_{args.fallback}"
    rep.write_csv(out / f"{stem}.csv")
    (out / f"{stem}.json").write_text(json.dumps({"config": rep.config, "aggregates": rep.aggregates}, indent=2))
    md = rep.to_markdown()
    (out / f"{stem}.md").write_text(md)
    print(md, end="")
    return 0


def cmd_sweep(args) -> int:
    net = args.net
    cs = _floats(args.calibrations)
    seeds = _ints(args.seeds)
    if not cs:
        raise UsageError("--calibrations must list at least one value")
    if not seeds:
        raise UsageError("--seeds must list at least one value")
    opts = _solver_opts(args)
    out = _out_dir(args)
    hidden = _ints(args.hidden) if args.hidden else None
    for seed in seeds:
        cfg = TrainConfig(**{**asdict(_train_config(args)), "seed": seed})
        test = generate_split(net, None, args.n_test, "test", REGIMES[args.regime], seed, args.regime,
                              opts, args.workers)
        entries = bench.run_sweep(net, [c / 100.0 for c in cs], args.n_train, args.n_test, seed, cfg, hidden,
                                  args.regime, args.fallback, opts, test, args.workers)
        stem = f"{args.name or net.name + '_sweep'}_s{seed}"
        bench.write_sweep_csv(entries, out / f"{stem}.csv")
        for e in entries:
            if e.report is not None:
                e.report.write_csv(out / f"{stem}_c{100 * e.c:g}.csv")
        md = bench.sweep_markdown(entries, net.name)
        (out / f"{stem}.md").write_text(md)
        print(f"seed {seed}")
        print(md, end="")
    return 0


def cmd_calibrate(args) -> int:
    net = args.net
    sens = compute_sensitivity(build_admittance(net))
    k = sens.k
    print(f"network {net.network_id}: {net.n_bus} buses, {net.n_branch} branches, {net.n_gen} generators")
    print(f"sensitivity matrix {sens.m.shape[0]}x{sens.m.shape[1]}: max |entry| {np.abs(sens.m).max():.6g}, "
          f"mean |entry| {np.abs(sens.m).mean():.6g}")
    print(f"k: min {k.min():.6g}  mean {k.mean():.6g}  max {k.max():.6g}")
    order = np.argsort(-k)[: args.top]
    for i in order:
        br = net.branches[i]
        print(f"  branch {i:4d} ({br.from_bus}-{br.to_bus}): k = {k[i]:.6g}")
    if args.epsilon is not None:
        plan = plan_from_epsilon(sens, net.n_gen, args.epsilon)
        lim = apply_plan(net, plan)
        print(f"epsilon {args.epsilon:g} MW: slack margin {plan.slack_margin:.6g} MW, "
              f"min calibrated capacity {lim.line_cap.min():.6g} MW")
    if args.lipschitz is not None:
        hidden = _ints(args.hidden) if args.hidden else None
        n_neurons = max(hidden) if hidden else args.neurons
        n_hid = len(hidden) if hidden else args.layers
        bound = worst_case_error_bound(args.lipschitz, args.diameter, n_neurons, n_hid)
        print(f"worst-case error bound: {bound:.6g}")
    if args.json:
        (_out_dir(args) / f"{net.name}_sensitivity.json").write_text(
            json.dumps({"network_id": net.network_id, "k": k.tolist()}))
    return 0


# -- parser ------------------------------------------------------------------------


def _common(p, case=True):
    if case:
        p.add_argument("--case", default="case30", help="bundled case name or path (.m / .json)")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or cwd)")
    p.add_argument("--name", help="stem for output files")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1, help="processes for solving (timings stay serial)")
    g = p.add_argument_group("solver")
    g.add_argument("--tol-kkt", type=float, default=1e-8)
    g.add_argument("--tol-gap", type=float, default=1e-8)
    g.add_argument("--max-iter", type=int, default=100)
    g.add_argument("--solver-verbosity", type=int, default=0)


def _training(p):
    g = p.add_argument_group("training")
    g.add_argument("--hidden", help="hidden sizes, e.g. 32,16,8 (default per case)")
    g.add_argument("--epochs", type=int, default=200)
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--w1", type=float, default=1.0)
    g.add_argument("--w2", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="prevopf", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="TOML file with default option values")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="sample loads and label them with the solver")
    _common(p)
    p.add_argument("--calibration", type=float, default=0.0, help="percent tightening c, e.g. 3.5")
    p.add_argument("--epsilon", type=float, help="absolute per-generator error bound (MW)")
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--range", type=float, nargs=2, default=[1.0, 1.3], metavar=("LO", "HI"))
    p.add_argument("--test-regime", choices=sorted(REGIMES), help="sample the test split from a regime instead")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    _common(p)
    _training(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--init", help="start from an existing model file")
    p.add_argument("--no-penalty", action="store_true", help="train on L_PG only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model against the solver")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--test", help="test dataset file; otherwise sampled from --regime")
    p.add_argument("--regime", choices=sorted(REGIMES), default="full")
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--fallback", choices=FALLBACKS, default="l1-projection")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate one model per calibration value")
    _common(p)
    _training(p)
    p.add_argument("--calibrations", default="0.5,1.5,3.5,5,7", help="comma-separated percentages")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--n-train", type=int, default=5000)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--regime", choices=sorted(REGIMES), default="full")
    p.add_argument("--fallback", choices=FALLBACKS, default="l1-projection")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", help="sensitivities, margins and the approximation-error bound")
    _common(p)
    p.add_argument("--top", type=int, default=10, help="branches to list")
    p.add_argument("--epsilon", type=float, help="show the plan for this error bound (MW)")
    p.add_argument("--lipschitz", type=float, help="Lipschitz constant of the load-to-dispatch map")
    p.add_argument("--diameter", type=float, default=1.0, help="input domain diameter")
    p.add_argument("--neurons", type=int, default=32, help="max neurons per hidden layer")
    p.add_argument("--layers", type=int, default=3, help="hidden layers")
    p.add_argument("--hidden", help="hidden sizes; overrides --neurons/--layers")
    p.add_argument("--json", action="store_true", help="also write k to <out>/<case>_sensitivity.json")
    p.set_defaults(func=cmd_calibrate)
    return ap


def _load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"invalid config {path}: {exc}") from None


def _apply_config(ap: argparse.ArgumentParser, cfg: dict, verb: str | None):
    sub = next(a for a in ap._actions if isinstance(a, argparse._SubParsersAction))
    verbs = set(sub.choices)
    shared = {k: v for k, v in cfg.items() if k not in verbs}
    for name, p in sub.choices.items():
        known = {a.dest for a in p._actions}
        vals = {**shared, **cfg.get(name, {})}
        vals = {k.replace("-", "_"): v for k, v in vals.items()}
        if name == verb:
            unknown = sorted(set(vals) - known)
            if unknown:
                raise UsageError(f"unknown config keys for {name}: {', '.join(unknown)}")
        p.set_defaults(**{k: v for k, v in vals.items() if k in known})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        pre, _ = ap.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if pre.config:
            _apply_config(ap, _load_config(pre.config), pre.verb)
        args = ap.parse_args(argv)
    except UsageError as exc:
        print(f"prevopf: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        if hasattr(args, "case"):
            args.net = parse_case(args.case)
        return args.func(args)
    except UsageError as exc:
        print(f"prevopf: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"prevopf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (PrevOpfError, ValueError) as exc:
        print(f"prevopf: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
