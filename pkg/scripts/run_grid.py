"""Run a grid sweep from a config file and print both report tables.

    python scripts/run_grid.py scripts/acceptance_grid.cfg --out results/acceptance
"""
import argparse
import time
from pathlib import Path

from urlb.config import load_config
from urlb.protocol import report, run_grid


def main():
    p = argparse.ArgumentParser()
    p.add_argument("config")
    p.add_argument("--out", default="results/grid")
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    cfg = load_config(args.config)
    t = time.perf_counter()
    recs = run_grid(cfg, args.out, jobs=args.jobs)
    print(f"{len(recs)} records in {time.perf_counter() - t:.0f}s")
    out = Path(args.out)
    for group in ("algorithm", "category"):
        md, _ = report(out / "results.csv", out / "expert.csv", group)
        print(md)


if __name__ == "__main__":
    main()
