#!/usr/bin/env python3
"""Run the desk-scale experiment set and print a summary table.

    python scripts/run_desk_experiments.py --mnist-dir data/mnist --out runs/desk

Trains every config in configs/ (or the ones named with --only), then scores
raw mean and k-NN imputation on the masked test set.  Each run directory keeps
its config, frozen masks, metrics.csv and checkpoint.
"""
import argparse
import sys
import time
from pathlib import Path

from gridgraph.experiments import RunConfig, cmd_train, impute_eval

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--mnist-dir", required=True)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--configs", default=str(ROOT / "configs"))
    ap.add_argument("--only", nargs="*", help="config names without .cfg")
    ap.add_argument("--skip-impute", action="store_true")
    args = ap.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = sorted(Path(args.configs).glob("*.cfg"))
    if args.only:
        paths = [p for p in paths if p.stem in args.only]
    rows = []
    for path in paths:
        cfg = RunConfig.load(path)
        cfg.mnist_dir = args.mnist_dir
        resolved = out / path.name
        resolved.write_text(cfg.dump())
        start = time.perf_counter()
        summary = cmd_train(resolved, out / path.stem)
        rows.append((path.stem, summary, time.perf_counter() - start))
    if not args.skip_impute:
        for imputer in ("mean", "knn"):
            start = time.perf_counter()
            mse = impute_eval(args.mnist_dir, imputer)
            rows.append((f"impute-{imputer}", {"mse_inside": mse}, time.perf_counter() - start))

    print(f"{'run':<28} {'seconds':>8}  result")
    for name, summary, seconds in rows:
        result = "  ".join(f"{k}={v:.4f}" for k, v in summary.items())
        print(f"{name:<28} {seconds:8.0f}  {result}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
