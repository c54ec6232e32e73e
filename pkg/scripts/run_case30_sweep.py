"""Case30 calibration sweep at desk scale, one table per seed.

    python scripts/run_case30_sweep.py --seeds 1,2,3 --out results/case30_sweep

Trains one model per calibration value on 5000 samples and evaluates all of
them on a shared 1000-sample test set drawn from the same seed.
"""

import argparse
import json
import time
from pathlib import Path

from prevopf.bench import run_sweep, sweep_markdown, write_sweep_csv
from prevopf.dataset import REGIMES, generate_split
from prevopf.grid import parse_case
from prevopf.mlp import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--case", default="case30")
    ap.add_argument("--calibrations", default="0,0.5,1.5,3.5,5,7", help="percent values")
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--n-train", type=int, default=5000)
    ap.add_argument("--n-test", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--lr", type=float, default=0.1)
    ap.add_argument("--regime", choices=sorted(REGIMES), default="full")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="results/case30_sweep")
    args = ap.parse_args()

    net = parse_case(args.case)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cs = [float(c) / 100 for c in args.calibrations.split(",")]
    summary = {}
    for seed in (int(s) for s in args.seeds.split(",")):
        t0 = time.time()
        test = generate_split(net, None, args.n_test, "test", REGIMES[args.regime], seed, args.regime,
                              workers=args.workers)
        cfg = TrainConfig(epochs=args.epochs, lr=args.lr, seed=seed)
        entries = run_sweep(net, cs, args.n_train, args.n_test, seed, cfg, regime=args.regime, test=test,
                            workers=args.workers)
        stem = out / f"{net.name}_s{seed}"
        write_sweep_csv(entries, f"{stem}.csv")
        md = sweep_markdown(entries, net.name)
        Path(f"{stem}.md").write_text(md)
        summary[seed] = {f"{100 * e.c:g}": (e.report.aggregates if e.report else {"error": e.error})
                         for e in entries}
        print(f"seed {seed} ({time.time() - t0:.0f} s)\n{md}", flush=True)
    (out / f"{net.name}_summary.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
