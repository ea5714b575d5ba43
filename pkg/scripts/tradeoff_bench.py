"""Quality and speed of truncated SV evaluation over index resolution and candidate count."""

import argparse
import csv
import math

import numpy as np

from sphervor import fastsv
from sphervor.bases import SvParams
from sphervor.cli import probe_throughput
from sphervor.sphere import fibonacci_sphere


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sites", type=int, default=2048)
    ap.add_argument("--tau", type=float, default=1500.0)
    ap.add_argument("--res", default="4,8,16,32")
    ap.add_argument("--m", default="2,4,8,16,32")
    ap.add_argument("--knn", default="8,16,32")
    ap.add_argument("--csv", default="tradeoff.csv")
    args = ap.parse_args()

    K = args.sites
    params = SvParams(fibonacci_sphere(K), np.random.default_rng(0).uniform(0, 1, (K, 3)), np.full(K, math.log(args.tau)), "explicit")
    configs = [(int(r), int(m)) for r in args.res.split(",") for m in args.m.split(",")]
    rows, full = fastsv.bench_eval(params, configs)
    with open(args.csv, "w", newline="") as f:
        w = csv.DictWriter(f, list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"{'res':>4} {'m':>4} {'max_err':>10} {'mean_err':>10} {'speedup':>8}")
    for r in rows:
        print(f"{r['res']:4d} {r['m']:4d} {r['max_err']:10.3e} {r['mean_err']:10.3e} {r['evals_per_sec'] / full:8.1f}")
    for k in (int(x) for x in args.knn.split(",")):
        print(f"knn {k:3d}: {probe_throughput(k, 128, 32, 4096, 0):.4g} probe lookups/s")


if __name__ == "__main__":
    main()
