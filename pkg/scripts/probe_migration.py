"""Probes started far from a glossy sphere drift toward it while fitting.

References come from a ring of opaque probes hugging the sphere. A fresh
field is scattered through a large box and every parameter group is trained.
Loss and mean probe distance to the sphere surface are printed per
checkpoint and written to ``migration.csv``; probe files are kept per step.
"""

import argparse
import csv
import os

import numpy as np

from sphervor import probes, shading
from sphervor.fitter import FitConfig
from sphervor.sphere import CubeMap, fibonacci_sphere


def ring_field(count: int, radius: float, knn_k: int, rng) -> probes.ProbeField:
    sites = np.tile(fibonacci_sphere(8), (count, 1, 1))
    far = CubeMap.from_function(shading.sky, 8)
    return probes.ProbeField(radius * fibonacci_sphere(count), np.full(count, 3.0), sites, rng.uniform(0.1, 1.0, (count, 8, 3)), far, knn_k=knn_k)


def surface_distance(pf: probes.ProbeField, sphere) -> float:
    return float(np.mean(np.linalg.norm(pf.positions - np.asarray(sphere.center), axis=1) - sphere.radius))


def run(iterations=300, lr=0.02, count=12, knn_k=4, box=2.5, seed=1, callback=None):
    """Returns ``(checkpoints, distances)`` for the migration scenario."""
    scene = shading.load_scene("builtin:glossysphere")
    sphere = scene.objects[0]
    cams = list(scene.cameras)
    refs = shading.render_references(scene, cams, ring_field(count, 1.5 * sphere.radius, knn_k, np.random.default_rng(0)))
    init = probes.random_field(count, [-box] * 3, [box] * 3, 8, np.random.default_rng(seed), far_res=8, knn_k=knn_k)
    rep = shading.fit_probe_scene(scene, cams, refs, init, FitConfig(iterations=iterations, step_size=lr, log_every=max(1, iterations // 6)), callback=callback)
    return rep.checkpoints, [surface_distance(cp["field"], sphere) for cp in rep.checkpoints]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=600)
    ap.add_argument("--lr", type=float, default=0.02)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", default="out/migration")
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    cps, dists = run(args.iters, args.lr, seed=args.seed)
    with open(os.path.join(args.out, "migration.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "mean_surface_distance"])
        for cp, d in zip(cps, dists):
            w.writerow([cp["step"], repr(cp["loss"]), repr(d)])
            probes.save_field(os.path.join(args.out, f"probes_{cp['step']:06d}.txt"), cp["field"])
            print(f"step {cp['step']:5d}  loss {cp['loss']:.4g}  mean distance to surface {d:.3f}")


if __name__ == "__main__":
    main()
