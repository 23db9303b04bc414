#!/usr/bin/env python3
"""End-to-end experiment: data -> train -> attack -> metrics/projections/detector -> report.

Everything flows through the embedmatch CLI, so each stage leaves a manifest
and can be re-run in isolation.  --quick shrinks the run for a smoke test.
"""

import argparse
import sys
from pathlib import Path

from embedmatch.cli import main as cli


def run(argv):
    print("+ embedmatch " + " ".join(argv))
    code = cli(argv)
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default="runs/demo", help="output directory root")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--kind", choices=["vit", "mil"], default="mil")
    ap.add_argument("--epsilon", type=float, default=0.1)
    ap.add_argument("--workers", type=int, default=2)
    ap.add_argument("--quick", action="store_true",
                    help="small dataset, few epochs, few pairs")
    args = ap.parse_args()

    root = Path(args.root)
    seed = str(args.seed)
    data, model, attack = root / "data", root / "model", root / "attack"

    if args.quick:
        gen = ["--num-per-class", "40"]
        tr = ["--epochs", "8"]
        atk = ["--num-pairs", "10", "--max-iters", "600"]
    else:
        gen, tr, atk = [], [], []

    run(["gen-data", "--out", str(data), "--seed", seed] + gen)
    run(["train", "--data", str(data), "--out", str(model), "--seed", seed] + tr)
    run(["attack", "--weights", str(model / "weights.vitw"), "--data", str(data),
         "--out", str(attack), "--kind", args.kind, "--epsilon", str(args.epsilon),
         "--workers", str(args.workers), "--seed", seed] + atk)
    common = ["--weights", str(model / "weights.vitw"), "--data", str(data),
              "--records", str(attack / "records.jsonl"), "--kind", args.kind,
              "--out", str(attack), "--seed", seed]
    run(["metrics"] + common)
    run(["project"] + common)
    run(["detect"] + common)
    run(["report", "--run", str(attack)])


if __name__ == "__main__":
    main()
