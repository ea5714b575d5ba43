"""``sphervor`` command line: fit, restarts, render, bench, probe-fit, make-refs, replay.

Exit codes: 0 success, 2 usage error (bad flags, missing files), 3 numeric divergence.
Every run writes ``run.json`` into the output directory with the resolved
configuration; ``sphervor replay <run.json>`` re-executes it.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__, bases, fastsv, imgio, probes, shading
from .fitter import (
    DivergedError,
    FitConfig,
    ModelSpec,
    SampleSet,
    default_threads,
    fit,
    restart_experiment,
    write_trace_csv,
)
from .sphere import CubeMap, EquirectMap, cubemap_sample, fibonacci_sphere, random_dirs

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3

# run.json keys that legitimately differ between identical runs
TIMING_KEYS = ("wall_time", "wall_ms", "evals_per_sec", "full_evals_per_sec")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument helpers


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("list must not be empty")
    return vals


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("list must not be empty")
    return vals


def _basis_list(text: str) -> list[str]:
    vals = [t.strip() for t in text.split(",") if t.strip()]
    bad = [v for v in vals if v not in ("sh", "sg", "sb", "sv")]
    if bad or not vals:
        raise argparse.ArgumentTypeError(f"bases must be from sh,sg,sb,sv, got {text!r}")
    return vals


def _group_list(text: str) -> list[str]:
    vals = [t.strip() for t in text.split(",") if t.strip()]
    bad = [v for v in vals if v not in shading.PARAM_GROUPS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown parameter groups {bad}; choose from {','.join(shading.PARAM_GROUPS)}")
    return vals


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v

    return parse


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _check_file(path: str, what: str) -> None:
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")


def _load_target(spec: str, samples: int) -> SampleSet:
    if spec.startswith("builtin:"):
        return SampleSet.from_builtin(spec[len("builtin:") :], samples)
    _check_file(spec, "target")
    img = imgio.read_pfm(spec)
    h, w, _ = img.shape
    if w == 2 * h:
        return SampleSet.from_equirect(EquirectMap(img), samples, spec)
    cmap = imgio.read_cubemap(spec)
    return SampleSet.from_function(lambda d: cubemap_sample(cmap, d, bilinear=True), samples, spec)


def _load_envmap(spec: str, face_res: int) -> CubeMap:
    if spec == "builtin:sky":
        return shading.sky_cubemap(face_res)
    _check_file(spec, "envmap")
    return imgio.load_envmap(spec, face_res)


def _fit_config(args) -> FitConfig:
    return FitConfig(iterations=args.iters, step_size=args.lr, seed=args.seed, log_every=args.log_every)


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args, out):
    data = _load_target(args.target, args.samples)
    rng = np.random.default_rng(args.seed)
    model = bases.random_model(args.basis, args.size, data.channels, rng, args.mode)
    cfg = _fit_config(args)
    results = {"params": bases.param_count(model)}
    try:
        rep = fit(model, data, cfg)
    except DivergedError as e:
        bases.save_model(os.path.join(out, "model.txt"), e.last_model)
        write_trace_csv(os.path.join(out, "trace.csv"), e.loss_trace)
        results.update(diverged_at=e.iteration)
        return EXIT_DIVERGED, results
    bases.save_model(os.path.join(out, "model.txt"), rep.model)
    write_trace_csv(os.path.join(out, "trace.csv"), rep.loss_trace)
    preview = EquirectMap.from_function(rep.model.evaluate, args.preview_height)
    imgio.write_pfm(os.path.join(out, "preview.pfm"), preview.data)
    imgio.write_ppm(os.path.join(out, "preview.ppm"), preview.data)
    print(f"final PSNR {rep.final_psnr:.3f} dB  (loss {rep.final_loss:.6g}, {results['params']} params)")
    results.update(final_psnr=rep.final_psnr, final_loss=rep.final_loss, wall_time=rep.wall_time)
    return EXIT_OK, results


HIST_COLORS = {"sv": (0.9, 0.2, 0.1), "sg": (0.1, 0.4, 0.9), "sb": (0.2, 0.7, 0.2), "sh": (0.6, 0.3, 0.8)}


def histogram_image(groups: dict, bins: int = 40, width: int = 480, height: int = 200) -> np.ndarray:
    """Grouped bar histogram of PSNR samples, one colour per basis."""
    finite = [v[np.isfinite(v)] for v in groups.values()]
    allv = np.concatenate(finite) if finite else np.zeros(1)
    lo, hi = (float(allv.min()), float(allv.max())) if allv.size else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts = {k: np.histogram(v, edges)[0] for k, v in zip(groups, finite)}
    top = max(1, max(c.max() for c in counts.values()))
    img = np.ones((height, width, 3))
    bin_w = width / bins
    sub = bin_w / max(1, len(groups))
    for g, (name, c) in enumerate(counts.items()):
        for b in range(bins):
            x0 = int(b * bin_w + g * sub)
            x1 = max(x0 + 1, int(b * bin_w + (g + 1) * sub))
            h = int(round((height - 1) * c[b] / top))
            if h:
                img[height - h :, x0:x1] = HIST_COLORS.get(name, (0.3, 0.3, 0.3))
    return img


def cmd_restarts(args, out):
    data = _load_target(args.target, args.samples)
    cfg = _fit_config(args)
    threads = default_threads(args.threads)
    summaries = {}
    for kind in args.bases:
        spec = ModelSpec.for_budget(kind, args.params_budget, data.channels, args.mode)
        summ = restart_experiment(spec, data, cfg, args.restarts, threads)
        summ.write_csv(os.path.join(out, f"restarts_{kind}.csv"))
        summ.write_json(os.path.join(out, f"restarts_{kind}.json"))
        summaries[kind] = summ
        st = summ.stats()
        print(f"{kind}: size {spec.size} ({spec.param_count} params)  median {st['median']:.3f}  std {st['std']:.3f}")
    imgio.write_ppm(os.path.join(out, "histogram.ppm"), histogram_image({k: s.psnrs for k, s in summaries.items()}), gamma=1.0)
    order = sorted(summaries, key=lambda k: -summaries[k].median)
    print("median PSNR ordering: " + " > ".join(order))
    results = {k: s.to_json() for k, s in summaries.items()}
    results["ordering"] = order
    return EXIT_OK, results


def laplacian_energy(img: np.ndarray, mask=None) -> float:
    """Mean squared 5-point Laplacian, over interior pixels inside ``mask``."""
    lum = np.asarray(img, dtype=np.float64).mean(axis=-1)
    lap = -4 * lum[1:-1, 1:-1] + lum[:-2, 1:-1] + lum[2:, 1:-1] + lum[1:-1, :-2] + lum[1:-1, 2:]
    if mask is not None:
        m = mask[1:-1, 1:-1] & mask[:-2, 1:-1] & mask[2:, 1:-1] & mask[1:-1, :-2] & mask[1:-1, 2:]
        lap = lap[m]
    return float(np.mean(lap * lap)) if lap.size else 0.0


def _save_image(out, stem, img):
    imgio.write_pfm(os.path.join(out, stem + ".pfm"), img)
    imgio.write_ppm(os.path.join(out, stem + ".ppm"), img)


def cmd_render(args, out):
    scene = shading.load_scene(args.scene)
    if not scene.cameras:
        raise UsageError("scene has no camera")
    far = _load_envmap(args.envmap, args.face_res)
    if args.probes == "none":
        pf = probes.ProbeField.far_only(far)
    else:
        _check_file(args.probes, "probe field")
        pf = probes.load_field(args.probes)
        if args.envmap != "builtin:sky":
            pf.far_field = far
    results = {"images": []}
    for k, cam in enumerate(scene.cameras):
        gbuf = shading.raytrace_gbuffer(scene, cam)
        img = shading.shade(gbuf, cam, pf, bilinear=args.bilinear)
        _save_image(out, f"render_{k:03d}", img)
        results["images"].append(f"render_{k:03d}")
        if args.dump_gbuffer:
            shading.write_gbuffer(os.path.join(out, f"gbuffer_{k:03d}"), gbuf)
    if args.tau_sweep:
        cam = scene.cameras[0]
        gbuf = shading.raytrace_gbuffer(scene, cam)
        sweep_field = pf
        if pf.count == 0:
            lo, hi = scene.bounds()
            sweep_field = shading.environment_probe(far, 0.5 * (lo + hi), args.sweep_sites)
        energies = {}
        for tau in args.tau_sweep:
            img = shading.shade(gbuf, cam, sweep_field, tau=tau, bilinear=args.bilinear)
            stem = f"tau_{tau:g}"
            _save_image(out, stem, img)
            energies[f"{tau:g}"] = laplacian_energy(img, gbuf.mask)
        results["laplacian_energy"] = energies
        print("tau sweep Laplacian energy: " + ", ".join(f"{k}:{v:.4g}" for k, v in energies.items()))
    return EXIT_OK, results


def probe_throughput(knn_k: int, n_probes: int, sites: int, n: int, seed: int, repeats: int = 3) -> float:
    rng = np.random.default_rng(seed)
    pf = probes.random_field(n_probes, [-1, -1, -1], [1, 1, 1], sites, rng, knn_k=knn_k)
    pts = rng.uniform(-1, 1, (n, 3))
    dirs = random_dirs(rng, n)
    tau = probes.roughness_to_tau(rng.uniform(0, 1, n))
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        probes.near_field(pf, pts, dirs, tau)
        best = min(best, time.perf_counter() - t0)
    return n / best


def cmd_bench(args, out):
    if args.sites < max(args.m_list):
        raise UsageError(f"m-list entries must not exceed --sites {args.sites}")
    rng = np.random.default_rng(args.seed)
    K = args.sites
    params = bases.SvParams(fibonacci_sphere(K), rng.uniform(0.0, 1.0, (K, 3)), np.full(K, np.log(args.tau)), mode="explicit")
    configs = [(r, m) for r in args.res_list for m in args.m_list]
    rows, full_rate = fastsv.bench_eval(params, configs, args.dirs, args.seed)
    with open(os.path.join(out, "bench_fastsv.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, ["res", "m", "max_err", "mean_err", "evals_per_sec"])
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    knn_rows = []
    for k in args.knn_list:
        if k > args.bench_probes:
            raise UsageError(f"knn {k} exceeds --bench-probes {args.bench_probes}")
        rate = probe_throughput(k, args.bench_probes, args.probe_sites, min(args.dirs, 4096), args.seed)
        knn_rows.append({"knn": k, "evals_per_sec": rate})
    with open(os.path.join(out, "bench_knn.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, ["knn", "evals_per_sec"])
        w.writeheader()
        w.writerows(knn_rows)
    for row in rows:
        print(f"res {row['res']:3d}  m {row['m']:5d}  max_err {row['max_err']:.3e}  mean_err {row['mean_err']:.3e}  {row['evals_per_sec']:.4g}/s")
    print(f"full evaluation {full_rate:.4g}/s")
    for row in knn_rows:
        print(f"knn {row['knn']:3d}  {row['evals_per_sec']:.4g} probe lookups/s")
    return EXIT_OK, {"fastsv": rows, "full_evals_per_sec": full_rate, "knn": knn_rows}


def _init_field(spec: str, scene, args) -> probes.ProbeField:
    if spec.startswith("random:"):
        try:
            n = int(spec[len("random:") :])
        except ValueError:
            raise UsageError(f"bad --probes-init {spec!r}") from None
        lo, hi = scene.bounds(0.2)
        rng = np.random.default_rng(args.seed)
        return probes.random_field(n, lo, hi, args.sites, rng, far_res=args.far_res, knn_k=args.knn)
    _check_file(spec, "probe field")
    return probes.load_field(spec)


def cmd_probe_fit(args, out):
    scene = shading.load_scene(args.scene)
    _check_file(os.path.join(args.refs, "cameras.txt"), "reference camera file")
    cams, refs = shading.read_references(args.refs)
    pf = _init_field(args.probes_init, scene, args)
    ckdir = os.path.join(out, "checkpoints")
    os.makedirs(ckdir, exist_ok=True)
    rows = []

    def on_checkpoint(cp):
        probes.save_field(os.path.join(ckdir, f"probes_{cp['step']:06d}.txt"), cp["field"])
        rows.append({"step": cp["step"], "loss": repr(cp["loss"]), "mean_alpha": repr(cp["mean_alpha"])})

    cfg = _fit_config(args)
    code = EXIT_OK
    results = {"probes": pf.count}
    try:
        rep = shading.fit_probe_scene(scene, cams, refs, pf, cfg, freeze=args.freeze, callback=on_checkpoint)
        final = rep.probes
        results.update(final_loss=rep.final_loss, final_psnr=rep.final_psnr, wall_time=rep.wall_time)
        print(f"final loss {rep.final_loss:.6g}  PSNR {rep.final_psnr:.3f} dB")
    except DivergedError as e:
        final = e.last_model
        code = EXIT_DIVERGED
        results.update(diverged_at=e.iteration)
    with open(os.path.join(out, "checkpoints.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, ["step", "loss", "mean_alpha"])
        w.writeheader()
        w.writerows(rows)
    probes.save_field(os.path.join(out, "probes.txt"), final)
    return code, results


def cmd_make_refs(args, out):
    scene = shading.load_scene(args.scene)
    if not scene.cameras:
        raise UsageError("scene has no camera")
    if args.probes == "demo":
        pf = shading.demo_field(scene, np.random.default_rng(args.seed), sites=args.sites, far_res=args.far_res, knn_k=args.knn)
        if args.fibonacci_sites:
            pf.sites[:] = fibonacci_sphere(args.sites)
    else:
        _check_file(args.probes, "probe field")
        pf = probes.load_field(args.probes)
    cams = list(scene.cameras)
    shading.write_references(out, cams, shading.render_references(scene, cams, pf))
    probes.save_field(os.path.join(out, "truth.txt"), pf)
    return EXIT_OK, {"cameras": len(cams), "probes": pf.count}


COMMANDS = {
    "fit": cmd_fit,
    "restarts": cmd_restarts,
    "render": cmd_render,
    "bench": cmd_bench,
    "probe-fit": cmd_probe_fit,
    "make-refs": cmd_make_refs,
}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="base RNG seed (default 0)")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="output directory (default $SPHERVOR_OUT or ./out)")
    common.add_argument("--threads", type=_nonneg_int, default=argparse.SUPPRESS, help="worker cap, 0 = all cores (default 1)")

    fitflags = argparse.ArgumentParser(add_help=False)
    fitflags.add_argument("--iters", type=_nonneg_int, default=2000)
    fitflags.add_argument("--lr", type=_positive(float), default=0.01)
    fitflags.add_argument("--samples", type=_positive(int), default=4096)
    fitflags.add_argument("--log-every", type=_nonneg_int, default=100)

    p = argparse.ArgumentParser(prog="sphervor", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", parents=[common, fitflags], help="fit one basis to a spherical target")
    f.add_argument("--target", required=True, help="PFM (equirect or stacked cube) or builtin:NAME")
    f.add_argument("--basis", choices=("sh", "sg", "sb", "sv"), required=True)
    f.add_argument("--size", type=_nonneg_int, required=True, help="SH degree L or lobe/site count K")
    f.add_argument("--mode", choices=("explicit", "norm"), default="explicit", help="SV temperature parameterization")
    f.add_argument("--preview-height", type=_positive(int), default=64)

    r = sub.add_parser("restarts", parents=[common, fitflags], help="random-restart stability study")
    r.add_argument("--target", required=True)
    r.add_argument("--bases", type=_basis_list, default=["sv", "sg", "sb", "sh"])
    r.add_argument("--params-budget", type=_positive(int), default=48)
    r.add_argument("--restarts", type=_positive(int), default=100)
    r.add_argument("--mode", choices=("explicit", "norm"), default="norm")

    d = sub.add_parser("render", parents=[common], help="shade a scene with probes and an environment")
    d.add_argument("--scene", default="builtin:mirrorsphere")
    d.add_argument("--probes", default="none", help="probe field file or 'none'")
    d.add_argument("--envmap", default="builtin:sky", help="PFM environment (equirect or cube) or builtin:sky")
    d.add_argument("--face-res", type=_positive(int), default=64)
    d.add_argument("--tau-sweep", type=_float_list, default=None)
    d.add_argument("--sweep-sites", type=_positive(int), default=512)
    d.add_argument("--bilinear", action="store_true")
    d.add_argument("--dump-gbuffer", action="store_true")

    b = sub.add_parser("bench", parents=[common], help="truncated-softmax and probe lookup benchmarks")
    b.add_argument("--sites", type=_positive(int), default=2048)
    b.add_argument("--tau", type=_positive(float), default=1500.0)
    b.add_argument("--res-list", type=_int_list, default=[4, 8, 16, 32])
    b.add_argument("--m-list", type=_int_list, default=[2, 4, 8, 16, 32])
    b.add_argument("--knn-list", type=_int_list, default=[8, 16, 32])
    b.add_argument("--dirs", type=_positive(int), default=10000)
    b.add_argument("--bench-probes", type=_positive(int), default=128)
    b.add_argument("--probe-sites", type=_positive(int), default=32)

    q = sub.add_parser("probe-fit", parents=[common, fitflags], help="learn a probe field from reference renders")
    q.add_argument("--scene", default="builtin:probescene")
    q.add_argument("--probes-init", default="random:128", help="random:N or a probe field file")
    q.add_argument("--refs", required=True, help="directory with cameras.txt and reference PFMs")
    q.add_argument("--sites", type=_positive(int), default=8)
    q.add_argument("--far-res", type=_positive(int), default=8)
    q.add_argument("--knn", type=_positive(int), default=8)
    q.add_argument("--freeze", type=_group_list, default=[], help="comma list of parameter groups to hold fixed: " + ",".join(shading.PARAM_GROUPS))

    m = sub.add_parser("make-refs", parents=[common], help="render reference images from a probe field")
    m.add_argument("--scene", default="builtin:probescene")
    m.add_argument("--probes", default="demo", help="probe field file or 'demo' (seeded grid field)")
    m.add_argument("--sites", type=_positive(int), default=8)
    m.add_argument("--far-res", type=_positive(int), default=8)
    m.add_argument("--knn", type=_positive(int), default=8)
    m.add_argument("--fibonacci-sites", action="store_true", help="demo field uses Fibonacci site layout")

    rp = sub.add_parser("replay", parents=[common], help="re-run from a run.json")
    rp.add_argument("run_json")
    return p


def _resolve(ns: argparse.Namespace) -> dict:
    cfg = vars(ns).copy()
    cfg.setdefault("seed", 0)
    cfg.setdefault("threads", 1)
    cfg.setdefault("out_dir", os.environ.get("SPHERVOR_OUT") or "out")
    return cfg


def run_config(cfg: dict) -> int:
    """Execute a resolved configuration dict; writes ``run.json``."""
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    args = argparse.Namespace(**cfg)
    t0 = time.perf_counter()
    code, results = COMMANDS[cfg["command"]](args, out)
    record = {
        "version": __version__,
        "command": cfg["command"],
        "config": cfg,
        "exit_code": code,
        "results": results,
        "wall_time": time.perf_counter() - t0,
    }
    with open(os.path.join(out, "run.json"), "w") as f:
        json.dump(record, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
    return code


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = _resolve(ns)
        if cfg["command"] == "replay":
            _check_file(cfg["run_json"], "run.json")
            with open(cfg["run_json"]) as f:
                cfg_old = json.load(f)["config"]
            if "out_dir" in vars(ns):
                cfg_old["out_dir"] = cfg["out_dir"]
            cfg = cfg_old
        return run_config(cfg)
    except (DivergedError, bases.NumericError) as e:
        print(f"sphervor: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ValueError, OSError) as e:
        print(f"sphervor: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
