"""Optional long run on case118 through the CLI (not part of the test suite).

    python scripts/run_case118.py --out results/case118 [--n-train 25000 --n-test 5000]

Prints the sensitivity summary, then sweeps the five calibration values plus
the uncalibrated baseline with the 128/64/32 architecture. At full size this
takes hours on one core.
"""

import argparse
import sys

from prevopf.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/case118")
    ap.add_argument("--n-train", type=int, default=5000)
    ap.add_argument("--n-test", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--lr", type=float, default=0.1)
    ap.add_argument("--seeds", default="1")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    code = cli(["calibrate", "--case", "case118", "--top", "5", "--json", "--out", args.out])
    if code:
        return code
    return cli([
        "sweep", "--case", "case118", "--calibrations", "0,0.5,1.5,3.5,5,7",
        "--n-train", str(args.n_train), "--n-test", str(args.n_test), "--epochs", str(args.epochs),
        "--lr", str(args.lr), "--seeds", args.seeds, "--workers", str(args.workers),
        "--out", args.out, "--name", "case118",
    ])


if __name__ == "__main__":
    sys.exit(main())
