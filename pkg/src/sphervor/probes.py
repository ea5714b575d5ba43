"""Learnable light probes: kNN lookup, inverse-distance blending, SV evaluation.

A :class:`ProbeField` keeps every probe's parameters stacked in arrays so a
whole G-buffer can be shaded at once. Probe SVs share a site count ``K``;
their temperature is never learned but supplied per query (from roughness),
so the stored ``log_tau`` column only travels along for the file format.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .bases import SvParams, format_model, parse_model, sigmoid, softmax
from .imgio import read_cubemap, write_cubemap
from .sphere import CubeMap, fibonacci_sphere, normalize

TAU_MIN = 0.2
TAU_MAX = 1500.0
KNN_K = 8
EPSILON = 1e-6


class ProbeStateError(RuntimeError):
    """Query cannot be answered with the current probe set (e.g. too few probes)."""


@dataclass(frozen=True)
class LightProbe:
    position: np.ndarray
    sv: SvParams
    alpha_logit: float

    @property
    def alpha(self) -> float:
        return float(sigmoid(self.alpha_logit))


@dataclass
class ProbeField:
    positions: np.ndarray  # (P, 3)
    alpha_logit: np.ndarray  # (P,)
    sites: np.ndarray  # (P, K, 3) raw site vectors
    values: np.ndarray  # (P, K, C)
    far_field: CubeMap
    knn_k: int = KNN_K
    tau_min: float = TAU_MIN
    tau_max: float = TAU_MAX
    epsilon: float = EPSILON
    log_tau: np.ndarray = field(default=None, repr=False)  # (P, K), unused at query time

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        P = len(self.positions)
        self.alpha_logit = np.asarray(self.alpha_logit, dtype=np.float64).reshape(P)
        self.sites = np.asarray(self.sites, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.sites.ndim != 3 or self.sites.shape[::2] != (P, 3) or self.values.shape[:2] != self.sites.shape[:2]:
            raise ValueError("sites must be (P, K, 3) and values (P, K, C)")
        if self.log_tau is None:
            self.log_tau = np.zeros(self.sites.shape[:2])
        if not self.tau_min < self.tau_max:
            raise ValueError("tau_min must be below tau_max")
        if P and self.knn_k > P:
            raise ValueError(f"knn_k={self.knn_k} exceeds probe count {P}")

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def sites_per_probe(self) -> int:
        return self.sites.shape[1]

    @property
    def channels(self) -> int:
        return self.far_field.channels

    @property
    def alpha(self) -> np.ndarray:
        return sigmoid(self.alpha_logit)

    def probe(self, i: int) -> LightProbe:
        sv = SvParams(self.sites[i], self.values[i], self.log_tau[i], mode="explicit")
        return LightProbe(self.positions[i].copy(), sv, float(self.alpha_logit[i]))

    def copy(self) -> "ProbeField":
        return replace(
            self,
            positions=self.positions.copy(),
            alpha_logit=self.alpha_logit.copy(),
            sites=self.sites.copy(),
            values=self.values.copy(),
            far_field=CubeMap(self.far_field.data.copy()),
            log_tau=self.log_tau.copy(),
        )

    @classmethod
    def far_only(cls, far_field: CubeMap) -> "ProbeField":
        """No probes at all: shading reduces to the environment lookup."""
        c = far_field.channels
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 1, 3)), np.zeros((0, 1, c)), far_field, knn_k=0)


def random_field(
    n_probes: int,
    bbox_min,
    bbox_max,
    sites: int,
    rng: np.random.Generator,
    far_res: int = 8,
    channels: int = 3,
    knn_k: int = KNN_K,
    value_std: float = 0.1,
    value_mean: float = 0.5,
) -> ProbeField:
    """Probes uniform in a box, Fibonacci sites, alpha = 0.5, grey values."""
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    pos = lo + (hi - lo) * rng.uniform(size=(n_probes, 3))
    site = np.broadcast_to(fibonacci_sphere(sites), (n_probes, sites, 3)).copy()
    vals = value_mean + value_std * rng.standard_normal((n_probes, sites, channels))
    far = CubeMap.constant(far_res, np.full(channels, value_mean))
    return ProbeField(pos, np.zeros(n_probes), site, vals, far, knn_k=min(knn_k, n_probes))


# ---------------------------------------------------------------------------
# Queries


def knn(pf: ProbeField, points, k: int | None = None, chunk: int = 2048):
    """Exact k nearest probes by Euclidean distance (ties to the lower index).

    Returns ``(indices, distances)``, both ``(n, k)``, nearest first.
    """
    k = pf.knn_k if k is None else k
    if pf.count < k or k < 1:
        raise ProbeStateError(f"need at least {k} probes, have {pf.count}")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    idx = np.empty((len(pts), k), dtype=np.int64)
    dist = np.empty((len(pts), k))
    for s in range(0, len(pts), chunk):
        diff = pts[s : s + chunk, None, :] - pf.positions[None, :, :]
        d = np.sqrt(np.sum(diff * diff, axis=-1))
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx[s : s + chunk] = order
        dist[s : s + chunk] = np.take_along_axis(d, order, axis=1)
    return idx, dist


def interp_weights(distances, epsilon: float = EPSILON) -> np.ndarray:
    """Normalized ``1 / (d + eps)`` weights along the last axis."""
    w = 1.0 / (np.asarray(distances, dtype=np.float64) + epsilon)
    return w / np.sum(w, axis=-1, keepdims=True)


def roughness_to_tau(R, tau_min: float = TAU_MIN, tau_max: float = TAU_MAX):
    """Linear map from roughness to SV temperature: R=0 -> tau_max, R=1 -> tau_min."""
    R = np.asarray(R, dtype=np.float64)
    if np.any((R < 0.0) | (R > 1.0)):
        warnings.warn("roughness outside [0, 1] clamped", RuntimeWarning, stacklevel=2)
        R = np.clip(R, 0.0, 1.0)
    tau = (1.0 - R) * tau_max + R * tau_min
    return float(tau) if tau.ndim == 0 else tau


def _probe_sv(pf: ProbeField, idx, dirs, tau, unit_sites=None):
    """Softmax weights ``(n, k, K)`` and values ``(n, k, C)`` of the selected probes."""
    unit = (normalize(pf.sites) if unit_sites is None else unit_sites)[idx]  # (n, k, K, 3)
    logits = np.einsum("nkjd,nd->nkj", unit, dirs) * tau[:, None, None]
    w = softmax(logits, axis=2)
    f = np.einsum("nkj,nkjc->nkc", w, pf.values[idx])
    return unit, w, f


@dataclass
class NearField:
    color: np.ndarray  # (n, C)
    alpha: np.ndarray  # (n,)
    idx: np.ndarray
    weights: np.ndarray


def near_field(pf: ProbeField, points, refl, tau, chunk: int | None = None, neighbors=None) -> NearField:
    """Blend the k nearest probes' SV radiance along ``refl`` and their alphas.

    ``neighbors`` may carry a precomputed ``knn`` result for ``points``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    refl = np.atleast_2d(np.asarray(refl, dtype=np.float64))
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (len(pts),))
    if np.any(tau < 0):
        raise ValueError("temperature must be non-negative")
    n = len(pts)
    idx, dist = knn(pf, pts) if neighbors is None else neighbors
    wt = interp_weights(dist, pf.epsilon)
    color = np.empty((n, pf.values.shape[2]))
    if chunk is None:
        chunk = max(1, 2_000_000 // max(1, pf.knn_k * pf.sites_per_probe))
    unit_sites = normalize(pf.sites)
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        _, _, f = _probe_sv(pf, idx[sl], refl[sl], tau[sl], unit_sites)
        color[sl] = np.einsum("nk,nkc->nc", wt[sl], f)
    alpha = np.sum(wt * pf.alpha[idx], axis=1)
    return NearField(color, alpha, idx, wt)


def _scatter_add(out, idx, rows) -> None:
    """``out[idx] += rows`` with repeated indices summed (sorted segment sums)."""
    flat = idx.ravel()
    rows = rows.reshape(flat.size, *out.shape[1:])
    order = np.argsort(flat, kind="stable")
    keys = flat[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    out[keys[starts]] += np.add.reduceat(rows[order], starts, axis=0)


@dataclass
class ProbeGrad:
    positions: np.ndarray
    alpha_logit: np.ndarray
    sites: np.ndarray
    values: np.ndarray

    @classmethod
    def zeros_like(cls, pf: ProbeField) -> "ProbeGrad":
        return cls(
            np.zeros_like(pf.positions),
            np.zeros_like(pf.alpha_logit),
            np.zeros_like(pf.sites),
            np.zeros_like(pf.values),
        )


def probe_grad(pf: ProbeField, points, refl, tau, upstream, chunk: int | None = None, neighbors=None) -> ProbeGrad:
    """Gradient of ``sum_n <up_n[:C], C_n> + up_n[C] * alpha_n`` w.r.t. probe params.

    kNN membership is held fixed (it is piecewise constant in the positions).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    refl = np.atleast_2d(np.asarray(refl, dtype=np.float64))
    up = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    n = len(pts)
    C = pf.values.shape[2]
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (n,))
    g = ProbeGrad.zeros_like(pf)
    idx, dist = knn(pf, pts) if neighbors is None else neighbors
    w_raw = 1.0 / (dist + pf.epsilon)
    total = np.sum(w_raw, axis=1, keepdims=True)
    wt = w_raw / total
    a_i = pf.alpha[idx]
    if chunk is None:
        chunk = max(1, 1_000_000 // max(1, pf.knn_k * pf.sites_per_probe))
    unit_sites = normalize(pf.sites)
    site_norm = np.linalg.norm(pf.sites, axis=-1, keepdims=True)
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        ix = idx[sl]
        u_c = up[sl, :C]
        u_a = up[sl, C]
        unit, w, f = _probe_sv(pf, ix, refl[sl], tau[sl], unit_sites)
        wts = wt[sl]
        # values: d/dc_k = w~ * softmax_k * u_c
        gv = np.einsum("nk,nkj,nc->nkjc", wts, w, u_c)
        _scatter_add(g.values, ix, gv)
        # sites through the logits tau * (s_hat . w_r)
        uc_dot_c = np.einsum("nc,nkjc->nkj", u_c, pf.values[ix])
        uc_dot_f = np.einsum("nc,nkc->nk", u_c, f)
        g_logit = wts[:, :, None] * w * (uc_dot_c - uc_dot_f[:, :, None])
        g_unit = (g_logit * tau[sl, None, None])[..., None] * refl[sl, None, None, :]
        radial = np.sum(g_unit * unit, axis=-1, keepdims=True)
        _scatter_add(g.sites, ix, (g_unit - radial * unit) / site_norm[ix])
        # alpha logits
        sig = a_i[sl]
        _scatter_add(g.alpha_logit, ix, wts * u_a[:, None] * sig * (1.0 - sig))
        # positions through the inverse-distance weights
        G = uc_dot_f + u_a[:, None] * sig
        dE_dw = (G - np.sum(wts * G, axis=1, keepdims=True)) / total[sl]
        d = dist[sl]
        diff = pf.positions[ix] - pts[sl, None, :]
        safe = np.where(d > 0, d, 1.0)
        coef = np.where(d > 0, -dE_dw * w_raw[sl] ** 2 / safe, 0.0)
        _scatter_add(g.positions, ix, coef[..., None] * diff)
    return g


# ---------------------------------------------------------------------------
# Files

PROBES_MAGIC = "PROBES 1"


def save_field(path, pf: ProbeField) -> None:
    """Text header + per-probe SV blocks; far field beside it as a stacked PFM."""
    path = os.fspath(path)
    far_path = path + ".far.pfm"
    lines = [
        PROBES_MAGIC,
        f"count {pf.count}",
        f"knn_k {pf.knn_k}",
        f"tau_min {pf.tau_min!r}",
        f"tau_max {pf.tau_max!r}",
        f"epsilon {pf.epsilon!r}",
        f"farfield {os.path.basename(far_path)}",
    ]
    for i in range(pf.count):
        p = pf.probe(i)
        lines.append("position " + " ".join(repr(float(x)) for x in p.position))
        lines.append(f"alpha_logit {p.alpha_logit!r}")
        lines.append(format_model(p.sv).rstrip("\n"))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    write_cubemap(far_path, pf.far_field, stacked=True)


def load_field(path) -> ProbeField:
    path = os.fspath(path)
    with open(path) as f:
        text = f.read()
    lines = text.splitlines()
    if lines[0].strip() != PROBES_MAGIC:
        raise ValueError(f"{path}: not a probe field file")
    hdr = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("position"):
        key, val = lines[i].split(maxsplit=1)
        hdr[key] = val
        i += 1
    count = int(hdr["count"])
    pos, alog, sites, vals, ltau = [], [], [], [], []
    for _ in range(count):
        pos.append([float(t) for t in lines[i].split()[1:]])
        alog.append(float(lines[i + 1].split()[1]))
        sv, i = parse_model(text, i + 2)
        sites.append(sv.sites)
        vals.append(sv.values)
        ltau.append(sv.log_tau if sv.log_tau is not None else np.zeros(sv.size))
    far = read_cubemap(os.path.join(os.path.dirname(path), hdr["farfield"]))
    c = far.channels
    return ProbeField(
        np.array(pos).reshape(-1, 3),
        np.array(alog),
        np.array(sites).reshape(count, -1, 3) if count else np.zeros((0, 1, 3)),
        np.array(vals).reshape(count, -1, c) if count else np.zeros((0, 1, c)),
        far,
        knn_k=int(hdr["knn_k"]),
        tau_min=float(hdr["tau_min"]),
        tau_max=float(hdr["tau_max"]),
        epsilon=float(hdr["epsilon"]),
        log_tau=np.array(ltau).reshape(count, -1) if count else None,
    )
