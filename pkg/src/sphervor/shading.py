"""Deferred shading over analytic G-buffers with a probe field and far-field cubemap.

Per surface pixel::

    w    = normalize(eye - P)          # toward the eye
    w_r  = 2 (w . N) N - w
    tau  = roughness_to_tau(R)
    C    = D + alpha * C_near(P, w_r; tau) + (1 - alpha) * C_far(w_r)

Pixels that miss all geometry show the far field along the primary ray.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import imgio
from .fitter import Adam, DivergedError, FitConfig, psnr_from_mse
from .probes import ProbeField, knn, near_field, probe_grad, roughness_to_tau
from .sphere import CubeMap, cubemap_sample, dir_to_texel, fibonacci_sphere, normalize, reflect, texel_index

HIT_EPS = 1e-6


# ---------------------------------------------------------------------------
# Camera and scene


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    orientation: np.ndarray  # columns: right, up, back (camera looks along -back)
    vfov: float  # radians
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        rot = np.asarray(self.orientation, dtype=np.float64)
        if rot.shape != (3, 3) or np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-9:
            raise ValueError("camera orientation must be orthonormal")
        object.__setattr__(self, "orientation", rot)
        if self.width < 1 or self.height < 1 or not 0 < self.vfov < math.pi:
            raise ValueError("bad camera resolution or field of view")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fov_deg: float = 40.0, width: int = 256, height: int = 256):
        eye = np.asarray(eye, dtype=np.float64)
        back = normalize(eye - np.asarray(target, dtype=np.float64))
        right = normalize(np.cross(np.asarray(up, dtype=np.float64), back))
        true_up = np.cross(back, right)
        return cls(eye, np.stack([right, true_up, back], axis=1), math.radians(fov_deg), int(width), int(height))

    def ray_dirs(self) -> np.ndarray:
        """Unit primary-ray directions through pixel centers, ``(h, w, 3)``, row 0 on top."""
        half = math.tan(0.5 * self.vfov)
        aspect = self.width / self.height
        sx = (2.0 * (np.arange(self.width) + 0.5) / self.width - 1.0) * half * aspect
        sy = (1.0 - 2.0 * (np.arange(self.height) + 0.5) / self.height) * half
        yy, xx = np.meshgrid(sy, sx, indexing="ij")
        r, u, b = self.orientation.T
        d = xx[..., None] * r + yy[..., None] * u - b
        return normalize(d)


@dataclass(frozen=True)
class Material:
    diffuse: tuple
    roughness: float


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    material: Material

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple
    material: Material

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            object.__setattr__(self, "normal", tuple(normalize(n)))


@dataclass(frozen=True)
class AnalyticScene:
    objects: tuple
    cameras: tuple = ()

    def bounds(self, pad: float = 0.0):
        """Box around spheres and plane anchor points."""
        pts = []
        for o in self.objects:
            if isinstance(o, Sphere):
                c = np.asarray(o.center)
                pts += [c - o.radius, c + o.radius]
            else:
                pts.append(np.asarray(o.point))
        pts = np.array(pts)
        return pts.min(axis=0) - pad, pts.max(axis=0) + pad


def _floats(tokens, n, line):
    if len(tokens) != n:
        raise ValueError(f"expected {n} numbers: {line!r}")
    return [float(t) for t in tokens]


def parse_scene(text: str) -> AnalyticScene:
    """Line format; ``#`` starts a comment.

    ``sphere cx cy cz r dr dg db rough``
    ``plane px py pz nx ny nz dr dg db rough``
    ``camera px py pz tx ty tz upx upy upz fov_deg w h``
    """
    objects, cams = [], []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        if head == "sphere":
            v = _floats(rest, 8, line)
            objects.append(Sphere(tuple(v[0:3]), v[3], Material(tuple(v[4:7]), v[7])))
        elif head == "plane":
            v = _floats(rest, 10, line)
            objects.append(Plane(tuple(v[0:3]), tuple(v[3:6]), Material(tuple(v[6:9]), v[9])))
        elif head == "camera":
            v = _floats(rest, 12, line)
            cams.append(Camera.look_at(v[0:3], v[3:6], v[6:9], v[9], int(v[10]), int(v[11])))
        else:
            raise ValueError(f"unknown scene entry {head!r}")
    if not objects:
        raise ValueError("scene has no objects")
    return AnalyticScene(tuple(objects), tuple(cams))


def format_camera(cam: Camera, target_dist: float = 1.0) -> str:
    r, u, b = cam.orientation.T
    t = cam.position - target_dist * b
    nums = [*cam.position, *t, *u]
    return "camera " + " ".join(repr(float(x)) for x in nums) + f" {math.degrees(cam.vfov)!r} {cam.width} {cam.height}"


BUILTIN_SCENES = {
    "mirrorsphere": """
sphere 0 0 0 1  0 0 0  0
camera 0 0 3  0 0 0  0 1 0  40 256 256
""",
    "probescene": """
plane 0 -1 0  0 1 0  0.10 0.10 0.10  0.99
sphere -0.6 -0.4 0  0.6  0.15 0.05 0.05  0.96
sphere 0.7 -0.5 0.3  0.5  0.05 0.10 0.15  0.93
camera 0 0.6 3.2   0 -0.5 0  0 1 0  45 48 48
camera 3.0 0.8 1.0  0 -0.5 0  0 1 0  45 48 48
camera -3.0 0.4 1.5  0 -0.5 0  0 1 0  45 48 48
camera 0.5 2.5 -2.5  0 -0.5 0  0 1 0  45 48 48
""",
    # one glossy sphere seen from four sides; used for probe migration runs
    "glossysphere": """
sphere 0 0 0 0.6  0.02 0.02 0.02  0.5
camera 0 0.5 3  0 0 0  0 1 0  40 24 24
camera 2.6 0.5 -1.5  0 0 0  0 1 0  40 24 24
camera -2.6 0.5 -1.5  0 0 0  0 1 0  40 24 24
camera 0 -2.5 0.5  0 0 0  0 0 1  40 24 24
""",
}


def load_scene(spec: str) -> AnalyticScene:
    """``builtin:NAME`` or a path to a scene text file."""
    if spec.startswith("builtin:"):
        name = spec[len("builtin:") :]
        if name not in BUILTIN_SCENES:
            raise ValueError(f"unknown builtin scene {name!r}")
        return parse_scene(BUILTIN_SCENES[name])
    with open(spec) as f:
        return parse_scene(f.read())


def sky(dirs) -> np.ndarray:
    """Procedural environment: sky gradient, dark ground, a warm sun and a cool patch."""
    d = np.atleast_2d(dirs)
    y = d[:, 1:2]
    top = np.array([0.25, 0.45, 0.9])
    horizon = np.array([0.9, 0.8, 0.65])
    ground = np.array([0.12, 0.1, 0.08])
    up = np.clip(y, 0.0, 1.0)
    col = np.where(y >= 0, horizon + (top - horizon) * np.sqrt(up), ground + (horizon - ground) * np.exp(8.0 * y))
    sun = normalize(np.array([0.5, 0.6, 0.62]))
    col = col + np.array([2.0, 1.7, 1.2]) * np.exp(60.0 * (d @ sun - 1.0))[:, None]
    patch = normalize(np.array([-0.7, 0.1, -0.7]))
    col = col + np.array([0.0, 0.4, 0.5]) * (d @ patch > 0.9)[:, None]
    return col


def sky_cubemap(face_res: int = 64) -> CubeMap:
    return CubeMap.from_function(sky, face_res)


# ---------------------------------------------------------------------------
# G-buffer


@dataclass
class GBuffer:
    width: int
    height: int
    P: np.ndarray  # (h, w, 3)
    N: np.ndarray
    R: np.ndarray  # (h, w)
    D: np.ndarray  # (h, w, 3)
    mask: np.ndarray  # (h, w) bool


def _hit_sphere(o, d, s: Sphere):
    c = np.asarray(s.center, dtype=np.float64)
    oc = o - c
    b = d @ oc
    cq = oc @ oc - s.radius * s.radius
    disc = b * b - cq
    ok = disc >= 0.0
    root = np.sqrt(np.where(ok, disc, 0.0))
    t0 = -b - root
    t1 = -b + root
    t = np.where(t0 > HIT_EPS, t0, np.where(t1 > HIT_EPS, t1, np.inf))
    return np.where(ok, t, np.inf)


def _hit_plane(o, d, p: Plane):
    n = np.asarray(p.normal, dtype=np.float64)
    denom = d @ n
    num = (np.asarray(p.point, dtype=np.float64) - o) @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
    return np.where(t > HIT_EPS, t, np.inf)


def raytrace_gbuffer(scene: AnalyticScene, cam: Camera) -> GBuffer:
    """Exact nearest-hit intersections for every pixel center."""
    d = cam.ray_dirs().reshape(-1, 3)
    o = cam.position
    n = d.shape[0]
    best = np.full(n, np.inf)
    which = np.full(n, -1)
    for k, obj in enumerate(scene.objects):
        t = _hit_sphere(o, d, obj) if isinstance(obj, Sphere) else _hit_plane(o, d, obj)
        closer = t < best
        best = np.where(closer, t, best)
        which = np.where(closer, k, which)
    mask = which >= 0
    P = np.zeros((n, 3))
    N = np.zeros((n, 3))
    R = np.zeros(n)
    D = np.zeros((n, 3))
    P[mask] = o + best[mask, None] * d[mask]
    for k, obj in enumerate(scene.objects):
        sel = which == k
        if not np.any(sel):
            continue
        if isinstance(obj, Sphere):
            N[sel] = normalize((P[sel] - np.asarray(obj.center)) / obj.radius)
        else:
            N[sel] = np.asarray(obj.normal, dtype=np.float64)
        R[sel] = obj.material.roughness
        D[sel] = obj.material.diffuse
    # two-sided surfaces: normals face the incoming ray
    flip = mask & (np.sum(N * d, axis=1) > 0)
    N[flip] = -N[flip]
    h, w = cam.height, cam.width
    return GBuffer(w, h, P.reshape(h, w, 3), N.reshape(h, w, 3), np.clip(R, 0.0, 1.0).reshape(h, w), D.reshape(h, w, 3), mask.reshape(h, w))


def write_gbuffer(prefix, gbuf: GBuffer) -> list[str]:
    paths = []
    for name, arr in (("pos", gbuf.P), ("nrm", gbuf.N), ("rough", gbuf.R), ("diff", gbuf.D)):
        p = f"{prefix}_{name}.pfm"
        imgio.write_pfm(p, arr)
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# Shading


@dataclass
class _Pass:
    """Flattened intermediates of one shading pass."""

    raw: np.ndarray  # (h*w, C) before the >= 0 clamp
    mask: np.ndarray
    far_dirs: np.ndarray  # reflection dirs on surfaces, view dirs elsewhere
    refl: np.ndarray  # (m, 3) reflection dirs of masked pixels
    tau: np.ndarray
    near: np.ndarray | None
    alpha: np.ndarray | None
    far: np.ndarray


def _surface_dirs(gbuf: GBuffer, cam: Camera):
    mask = gbuf.mask.reshape(-1)
    P = gbuf.P.reshape(-1, 3)[mask]
    N = gbuf.N.reshape(-1, 3)[mask]
    view = normalize(cam.position - P)
    refl = reflect(view, N)
    far_dirs = cam.ray_dirs().reshape(-1, 3).copy()
    far_dirs[mask] = refl
    return mask, P, refl, far_dirs


def _shade_pass(gbuf, cam, pf: ProbeField, tau=None, bilinear=False, neighbors=None, geom=None) -> _Pass:
    mask, P, refl, far_dirs = geom if geom is not None else _surface_dirs(gbuf, cam)
    far_all = cubemap_sample(pf.far_field, far_dirs, bilinear)
    raw = far_all.copy()
    R = gbuf.R.reshape(-1)[mask]
    t = roughness_to_tau(R, pf.tau_min, pf.tau_max) if tau is None else np.full(R.shape, float(tau))
    D = gbuf.D.reshape(-1, gbuf.D.shape[-1])[mask]
    cf = far_all[mask]
    near = alpha = None
    if pf.count and mask.any():
        nf = near_field(pf, P, refl, t, neighbors=neighbors)
        near, alpha = nf.color, nf.alpha
        raw[mask] = D + alpha[:, None] * near + (1.0 - alpha[:, None]) * cf
    else:
        raw[mask] = D + cf
    return _Pass(raw, mask, far_dirs, refl, t, near, alpha, far_all)


def shade(gbuf: GBuffer, cam: Camera, pf: ProbeField, tau=None, bilinear: bool = False) -> np.ndarray:
    """Linear-light image ``(h, w, C)``, clamped below at 0.

    ``tau`` overrides the roughness-derived temperature on every pixel.
    A field with no probes shades surfaces from the far field alone.
    """
    sp = _shade_pass(gbuf, cam, pf, tau, bilinear)
    return np.maximum(sp.raw, 0.0).reshape(gbuf.height, gbuf.width, -1)


def environment_probe(far_field: CubeMap, position, sites: int = 256) -> ProbeField:
    """One always-on probe whose SV samples the far field at Fibonacci sites.

    Lets a temperature override act on scenes without learned probes.
    """
    s = fibonacci_sphere(sites)
    vals = cubemap_sample(far_field, s, bilinear=True)
    return ProbeField(np.asarray(position, dtype=np.float64)[None], np.array([50.0]), s[None], vals[None], far_field, knn_k=1)


# ---------------------------------------------------------------------------
# Probe-field fitting


@dataclass
class ProbeFitReport:
    final_loss: float
    final_psnr: float
    loss_trace: np.ndarray
    wall_time: float
    probes: ProbeField = field(repr=False)
    checkpoints: list = field(default_factory=list, repr=False)


def _pack(pf: ProbeField) -> np.ndarray:
    return np.concatenate([pf.positions.ravel(), pf.alpha_logit, pf.sites.ravel(), pf.values.ravel(), pf.far_field.data.ravel()])


def _unpack(pf: ProbeField, v: np.ndarray) -> ProbeField:
    out = pf.copy()
    o = 0
    for name in ("positions", "alpha_logit", "sites", "values"):
        a = getattr(out, name)
        a[...] = v[o : o + a.size].reshape(a.shape)
        o += a.size
    out.far_field.data[...] = v[o:].reshape(out.far_field.data.shape)
    return out


PARAM_GROUPS = ("positions", "alpha_logit", "sites", "values", "far_field")


class _SceneObjective:
    def __init__(self, gbufs, cams, refs, freeze=()):
        self.gbufs = gbufs
        self.cams = cams
        self.refs = [np.asarray(r, dtype=np.float64).reshape(-1, r.shape[-1]) for r in refs]
        self.total = sum(r.size for r in self.refs)
        self.geom = [_surface_dirs(g, c) for g, c in zip(gbufs, cams)]
        self.freeze = frozenset(freeze)
        self.learn_positions = "positions" not in self.freeze
        self._nbr = None

    def neighbors(self, pf):
        if self.learn_positions or self._nbr is None:
            nbr = [knn(pf, g[1]) if pf.count and g[0].any() else None for g in self.geom]
            if not self.learn_positions:
                self._nbr = nbr
            return nbr
        return self._nbr

    def loss(self, pf) -> float:
        err = 0.0
        for g, c, r, geo, nb in zip(self.gbufs, self.cams, self.refs, self.geom, self.neighbors(pf)):
            sp = _shade_pass(g, c, pf, neighbors=nb, geom=geo)
            err += float(np.sum((np.maximum(sp.raw, 0.0) - r) ** 2))
        return err / self.total

    def __call__(self, pf: ProbeField):
        grad_pos = np.zeros_like(pf.positions)
        grad_a = np.zeros_like(pf.alpha_logit)
        grad_s = np.zeros_like(pf.sites)
        grad_v = np.zeros_like(pf.values)
        grad_far = np.zeros(pf.far_field.flat.shape)
        err = 0.0
        alpha_sum = 0.0
        alpha_n = 0
        r_far = pf.far_field.face_res
        for g, c, ref, geo, nb in zip(self.gbufs, self.cams, self.refs, self.geom, self.neighbors(pf)):
            sp = _shade_pass(g, c, pf, neighbors=nb, geom=geo)
            img = np.maximum(sp.raw, 0.0)
            resid = img - ref
            err += float(np.sum(resid * resid))
            up = (2.0 / self.total) * resid * (sp.raw >= 0.0)
            far_up = up.copy()
            m = sp.mask
            if sp.alpha is not None:
                u = up[m]
                far_up[m] = u * (1.0 - sp.alpha[:, None])
                up_probe = np.concatenate([u * sp.alpha[:, None], np.sum(u * (sp.near - sp.far[m]), axis=1, keepdims=True)], axis=1)
                pg = probe_grad(pf, geo[1], sp.refl, sp.tau, up_probe, neighbors=nb)
                grad_pos += pg.positions
                grad_a += pg.alpha_logit
                grad_s += pg.sites
                grad_v += pg.values
                alpha_sum += float(np.sum(sp.alpha))
                alpha_n += sp.alpha.size
            if "far_field" not in self.freeze:
                f, i, j = dir_to_texel(sp.far_dirs, r_far)
                np.add.at(grad_far, texel_index(f, i, j, r_far), far_up)
        for name, g in (("positions", grad_pos), ("alpha_logit", grad_a), ("sites", grad_s), ("values", grad_v)):
            if name in self.freeze:
                g[...] = 0.0
        grad = np.concatenate([grad_pos.ravel(), grad_a, grad_s.ravel(), grad_v.ravel(), grad_far.ravel()])
        mean_alpha = alpha_sum / alpha_n if alpha_n else 0.0
        return err / self.total, grad, mean_alpha


def fit_probe_scene(
    scene: AnalyticScene,
    cams,
    references,
    pf: ProbeField,
    cfg: FitConfig,
    freeze=(),
    callback=None,
) -> ProbeFitReport:
    """Adam over probe parameters and far-field texels against reference images.

    ``freeze`` names parameter groups (from ``PARAM_GROUPS``) held fixed.
    Geometry is fixed, so each camera's G-buffer is traced once. Every
    ``cfg.log_every`` steps a checkpoint ``{step, loss, mean_alpha, field}``
    is recorded (and handed to ``callback`` if given). Far-field texel
    gradients assume nearest-texel sampling.
    """
    cams = list(cams)
    if len(cams) != len(references):
        raise ValueError("need one reference image per camera")
    for c, r in zip(cams, references):
        if r.shape[:2] != (c.height, c.width):
            raise ValueError(f"reference shape {r.shape} does not match camera {c.height}x{c.width}")
    t0 = time.perf_counter()
    gbufs = [raytrace_gbuffer(scene, c) for c in cams]
    bad = set(freeze) - set(PARAM_GROUPS)
    if bad:
        raise ValueError(f"unknown parameter groups {sorted(bad)}")
    obj = _SceneObjective(gbufs, cams, references, freeze)
    opt = Adam(_pack(pf).size, cfg.step_size, cfg.beta1, cfg.beta2, cfg.eps)
    vec = _pack(pf)
    current = pf.copy()
    best_field = current
    trace = []
    checkpoints = []
    for it in range(cfg.iterations + 1):
        loss, g, mean_alpha = obj(current)
        if not (math.isfinite(loss) and np.all(np.isfinite(g))):
            raise DivergedError(it, best_field, np.array(trace))
        trace.append(loss)
        best_field = current
        if it == cfg.iterations or (cfg.log_every and it % cfg.log_every == 0):
            cp = {"step": it, "loss": loss, "mean_alpha": mean_alpha, "field": current.copy()}
            checkpoints.append(cp)
            if callback is not None:
                callback(cp)
        if it == cfg.iterations:
            break
        vec = opt.step(vec, g)
        current = _unpack(pf, vec)
    final = trace[-1]
    return ProbeFitReport(final, psnr_from_mse(final, cfg.peak), np.array(trace), time.perf_counter() - t0, best_field, checkpoints)


# ---------------------------------------------------------------------------
# Reference setups


def grid_positions(scene: AnalyticScene, counts=(4, 2, 2), pad: float = 0.2) -> np.ndarray:
    """Probe positions on a regular grid spanning the scene bounds."""
    lo, hi = scene.bounds(pad)
    axes = [np.linspace(lo[a], hi[a], counts[a]) if counts[a] > 1 else np.array([0.5 * (lo[a] + hi[a])]) for a in range(3)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def demo_field(scene: AnalyticScene, rng: np.random.Generator, positions=None, sites: int = 8, far_res: int = 8, knn_k: int = 8) -> ProbeField:
    """A random but well-behaved probe field, used to synthesize references."""
    pos = grid_positions(scene) if positions is None else np.asarray(positions, dtype=np.float64)
    P = len(pos)
    s = normalize(rng.standard_normal((P, sites, 3)))
    vals = rng.uniform(0.05, 0.9, (P, sites, 3))
    logit = rng.uniform(-1.5, 2.0, P)
    far = CubeMap.from_function(sky, far_res)
    return ProbeField(pos, logit, s, vals, far, knn_k=min(knn_k, P))


def render_references(scene: AnalyticScene, cams, pf: ProbeField):
    return [shade(raytrace_gbuffer(scene, c), c, pf) for c in cams]


def write_references(directory, cams, images) -> None:
    os.makedirs(directory, exist_ok=True)
    lines = []
    for k, (c, img) in enumerate(zip(cams, images)):
        name = f"ref_{k:03d}.pfm"
        imgio.write_pfm(os.path.join(directory, name), img)
        lines.append(format_camera(c) + " " + name)
    with open(os.path.join(directory, "cameras.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def read_references(directory):
    """``cameras.txt`` lists ``camera ... <image.pfm>`` lines; returns ``(cams, images)``."""
    cams, images = [], []
    with open(os.path.join(directory, "cameras.txt")) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            if tokens[0] != "camera" or len(tokens) != 14:
                raise ValueError(f"bad camera line {line!r}")
            cams.append(parse_scene("sphere 0 0 0 1 0 0 0 0\n" + " ".join(tokens[:13])).cameras[0])
            images.append(imgio.read_pfm(os.path.join(directory, tokens[13])))
    return cams, images


def mean_alpha(pf: ProbeField, gbuf: GBuffer) -> float:
    if not pf.count:
        return 0.0
    P = gbuf.P[gbuf.mask]
    return float(np.mean(near_field(pf, P, np.tile([0.0, 0.0, 1.0], (len(P), 1)), 1.0).alpha))

