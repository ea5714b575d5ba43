"""Ringing of high-degree SH on a 5 degree cap versus a 48-parameter SV fit.

Writes equirect previews of each fit so the ringing can be inspected.
"""

import argparse
import os

from sphervor import bases, imgio
from sphervor.fitter import FitConfig, SampleSet, fit, gibbs_demo
from sphervor.sphere import EquirectMap


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=12_000)
    ap.add_argument("--degree", type=int, default=30)
    ap.add_argument("--sv-tau", type=float, default=20.0)
    ap.add_argument("--out", default="out/gibbs")
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    data = SampleSet.from_builtin("glint5deg", args.samples)
    high, overshoot = gibbs_demo(data, args.degree, FitConfig(iterations=1000, step_size=0.01))
    low = fit(bases.ShParams.zeros(3, data.channels), data, FitConfig(iterations=2000, step_size=0.01))
    sv = fit(bases.preset_sv8(data.channels, tau=args.sv_tau), data, FitConfig(iterations=6000, step_size=0.1))

    print(f"SH L{args.degree}: overshoot {overshoot:.3f} above the target max, PSNR {high.final_psnr:.2f} dB")
    print(f"SH L3 ({bases.param_count(low.model)} params): {low.final_psnr:.2f} dB")
    print(f"SV 8 sites ({bases.param_count(sv.model)} params): {sv.final_psnr:.2f} dB")
    for name, rep in (("sh_high", high), ("sh3", low), ("sv8", sv)):
        img = EquirectMap.from_function(rep.model.evaluate, 256).data
        imgio.write_pfm(os.path.join(args.out, f"{name}.pfm"), img)
        imgio.write_ppm(os.path.join(args.out, f"{name}.ppm"), img)


if __name__ == "__main__":
    main()
