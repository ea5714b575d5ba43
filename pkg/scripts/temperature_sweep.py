"""Mirror sphere rendered with the probe temperature forced to a list of values.

Sharpness grows with tau; the Laplacian energy of each image is printed.
"""

import argparse
import os

from sphervor import imgio, shading
from sphervor.cli import laplacian_energy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--taus", default="0,5,50,100,250")
    ap.add_argument("--sites", type=int, default=512)
    ap.add_argument("--out", default="out/tau_sweep")
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    scene = shading.load_scene("builtin:mirrorsphere")
    cam = scene.cameras[0]
    gbuf = shading.raytrace_gbuffer(scene, cam)
    pf = shading.environment_probe(shading.sky_cubemap(64), [0.0, 0.0, 0.0], args.sites)
    for tau in (float(t) for t in args.taus.split(",")):
        img = shading.shade(gbuf, cam, pf, tau=tau)
        imgio.write_ppm(os.path.join(args.out, f"tau_{tau:g}.ppm"), img)
        print(f"tau {tau:7g}  laplacian energy {laplacian_energy(img, gbuf.mask):.4g}")


if __name__ == "__main__":
    main()
