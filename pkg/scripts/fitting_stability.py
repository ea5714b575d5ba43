"""Random-restart study on the four-cell target at a matched parameter budget.

Prints per-basis PSNR statistics and writes per-restart CSVs plus a histogram.
"""

import argparse
import os

import numpy as np

from sphervor import imgio
from sphervor.cli import histogram_image
from sphervor.fitter import FitConfig, ModelSpec, SampleSet, default_threads, restart_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--target", default="cells4")
    ap.add_argument("--budget", type=int, default=48)
    ap.add_argument("--restarts", type=int, default=100)
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--samples", type=int, default=1024)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out/stability")
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    data = SampleSet.from_builtin(args.target, args.samples)
    cfg = FitConfig(iterations=args.iters, step_size=args.lr, seed=args.seed)
    psnrs = {}
    for kind in ("sv", "sg", "sb"):
        spec = ModelSpec.for_budget(kind, args.budget, data.channels, "norm")
        summ = restart_experiment(spec, data, cfg, args.restarts, default_threads(args.threads))
        summ.write_csv(os.path.join(args.out, f"restarts_{kind}.csv"))
        s = summ.stats()
        psnrs[kind] = summ.psnrs
        q = np.percentile(summ.psnrs, [10, 90])
        print(f"{kind}  size {spec.size:2d}  params {spec.param_count}  median {s['median']:6.2f}  std {s['std']:5.2f}  p10 {q[0]:6.2f}  p90 {q[1]:6.2f}")
    imgio.write_ppm(os.path.join(args.out, "histogram.ppm"), histogram_image(psnrs), gamma=1.0)


if __name__ == "__main__":
    main()
