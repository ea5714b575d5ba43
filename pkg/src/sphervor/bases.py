"""Spherical function families and their analytic parameter gradients.

Four model types share one small protocol:

* ``evaluate(dirs)`` returns ``(n, C)`` values for ``(n, 3)`` unit directions;
* ``grad(dirs, upstream)`` returns the gradient of
  ``sum_i <upstream_i, f(dirs_i)>`` with respect to the flat parameter vector;
* ``vector()`` / ``with_vector(v)`` convert to and from that flat vector.

Parameter layout is row-per-lobe (row-per-coefficient for SH), in the order
below, flattened row-major. The same rows are what the model file stores.

=====================  =================================================
kind                   row contents
=====================  =================================================
``sh``                 ``c_lm[0..C)`` for ``l = 0..L``, ``m = -l..l``
``sg``                 ``d[3], log_tau, amp[0..C)``
``sb``                 ``d[3], alpha_raw, beta_raw, amp[0..C)``
``sv`` (explicit)      ``s[3], log_tau, value[0..C)``
``sv`` (norm)          ``s[3], value[0..C)``
=====================  =================================================

Direction vectors ``d`` / ``s`` are stored unnormalized and normalized on
use. ``alpha`` and ``beta`` pass through softplus; temperatures through exp.
In norm mode a site's temperature is the length of its stored vector, so
its logit is simply ``s . w``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .sphere import fibonacci_sphere, normalize, random_dirs

SB_BASE_FLOOR = 1e-12
SV_MODES = ("explicit", "norm")


class NumericError(ValueError):
    """A model parameter is NaN or infinite."""

    def __init__(self, index: int, value: float):
        super().__init__(f"non-finite parameter at index {index}: {value}")
        self.index = index


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(logits, axis=-1):
    m = np.max(logits, axis=axis, keepdims=True)
    e = np.exp(logits - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def _check_finite(vec: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(vec))
    if bad.size:
        raise NumericError(int(bad[0]), float(vec[bad[0]]))


def _tangent(g_hat, raw, unit):
    """Pull a gradient w.r.t. a unit vector back to the raw vector."""
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    radial = np.sum(g_hat * unit, axis=-1, keepdims=True)
    return (g_hat - radial * unit) / norm


# ---------------------------------------------------------------------------
# Spherical harmonics


def sh_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_index(l: int, m: int) -> int:
    return l * (l + 1) + m


def sh_basis(degree: int, dirs) -> np.ndarray:
    """Real orthonormal SH ``Y_lm`` at ``dirs``, shape ``(n, (L+1)^2)``.

    No Condon-Shortley phase: ``Y_1,-1 ~ y``, ``Y_10 ~ z``, ``Y_11 ~ x``.
    The ``sin^m(theta)`` factor of the associated Legendre functions is folded
    into ``Re/Im (x + iy)^m``, so everything stays polynomial in ``x, y, z``.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    n = dirs.shape[0]
    out = np.empty((n, sh_count(degree)))
    cos_m = np.ones(n)  # Re (x + iy)^m
    sin_m = np.zeros(n)  # Im (x + iy)^m
    q_mm = 1.0 / math.sqrt(4.0 * math.pi)
    sqrt2 = math.sqrt(2.0)
    for m in range(degree + 1):
        if m > 0:
            q_mm *= math.sqrt((2.0 * m + 1.0) / (2.0 * m))
            cos_m, sin_m = x * cos_m - y * sin_m, x * sin_m + y * cos_m
        # associated Legendre (sin^m removed) for l = m, m+1, ...
        q_prev2 = None
        q_prev = np.full(n, q_mm)
        for l in range(m, degree + 1):
            if l == m:
                q = q_prev
            elif l == m + 1:
                q = math.sqrt(2.0 * m + 3.0) * z * q_prev
            else:
                a = math.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
                b = math.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
                q = a * (z * q_prev - b * q_prev2)
            if l > m:
                q_prev2, q_prev = q_prev, q
            if m == 0:
                out[:, sh_index(l, 0)] = q
            else:
                out[:, sh_index(l, m)] = sqrt2 * q * cos_m
                out[:, sh_index(l, -m)] = sqrt2 * q * sin_m
    return out


@dataclass(frozen=True)
class ShParams:
    coeffs: np.ndarray  # ((L+1)^2, C)
    kind: str = field(default="sh", init=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.ndim == 1:
            c = c[:, None]
        L = math.isqrt(c.shape[0]) - 1
        if sh_count(L) != c.shape[0]:
            raise ValueError(f"SH coefficient count {c.shape[0]} is not a square")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, degree: int, channels: int = 3) -> "ShParams":
        return cls(np.zeros((sh_count(degree), channels)))

    @property
    def degree(self) -> int:
        return math.isqrt(self.coeffs.shape[0]) - 1

    @property
    def size(self) -> int:
        return self.degree

    @property
    def channels(self) -> int:
        return self.coeffs.shape[1]

    def rows(self) -> np.ndarray:
        return self.coeffs

    def vector(self) -> np.ndarray:
        return self.coeffs.ravel().copy()

    def with_vector(self, v) -> "ShParams":
        return ShParams(np.asarray(v, dtype=np.float64).reshape(self.coeffs.shape))

    def evaluate(self, dirs) -> np.ndarray:
        return sh_basis(self.degree, dirs) @ self.coeffs

    def grad(self, dirs, upstream) -> np.ndarray:
        Y = sh_basis(self.degree, dirs)
        return (Y.T @ _as_upstream(upstream, self.channels)).ravel()


# ---------------------------------------------------------------------------
# Spherical Gaussians


@dataclass(frozen=True)
class SgParams:
    dirs: np.ndarray  # (K, 3) raw lobe axes
    log_tau: np.ndarray  # (K,)
    amps: np.ndarray  # (K, C)
    kind: str = field(default="sg", init=False)

    def __post_init__(self):
        object.__setattr__(self, "dirs", np.asarray(self.dirs, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "log_tau", np.asarray(self.log_tau, dtype=np.float64).reshape(-1))
        amps = np.asarray(self.amps, dtype=np.float64)
        object.__setattr__(self, "amps", amps.reshape(len(self.dirs), -1))

    @property
    def size(self) -> int:
        return self.dirs.shape[0]

    @property
    def channels(self) -> int:
        return self.amps.shape[1]

    @property
    def tau(self) -> np.ndarray:
        return np.exp(self.log_tau)

    def rows(self) -> np.ndarray:
        return np.concatenate([self.dirs, self.log_tau[:, None], self.amps], axis=1)

    def vector(self) -> np.ndarray:
        return self.rows().ravel()

    def with_vector(self, v) -> "SgParams":
        r = np.asarray(v, dtype=np.float64).reshape(self.size, -1)
        return SgParams(r[:, :3], r[:, 3], r[:, 4:])

    def _lobes(self, dirs):
        unit = normalize(self.dirs)
        tau = self.tau
        e = np.exp(tau * (dirs @ unit.T - 1.0))
        return unit, tau, e

    def evaluate(self, dirs) -> np.ndarray:
        dirs = np.atleast_2d(dirs)
        _, _, e = self._lobes(dirs)
        return e @ self.amps

    def grad(self, dirs, upstream) -> np.ndarray:
        dirs = np.atleast_2d(dirs)
        u = _as_upstream(upstream, self.channels)
        unit, tau, e = self._lobes(dirs)
        g_amp = e.T @ u
        h = (u @ self.amps.T) * e  # d/d(exponent)
        g_logtau = np.sum(h * (dirs @ unit.T - 1.0), axis=0) * tau
        g_unit = tau[:, None] * (h.T @ dirs)
        g_dir = _tangent(g_unit, self.dirs, unit)
        return np.concatenate([g_dir, g_logtau[:, None], g_amp], axis=1).ravel()


# ---------------------------------------------------------------------------
# Spherical Betas


@dataclass(frozen=True)
class SbParams:
    dirs: np.ndarray  # (K, 3)
    alpha_raw: np.ndarray  # (K,) softplus^-1 of alpha
    beta_raw: np.ndarray  # (K,)
    amps: np.ndarray  # (K, C)
    kind: str = field(default="sb", init=False)

    def __post_init__(self):
        object.__setattr__(self, "dirs", np.asarray(self.dirs, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "alpha_raw", np.asarray(self.alpha_raw, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "beta_raw", np.asarray(self.beta_raw, dtype=np.float64).reshape(-1))
        amps = np.asarray(self.amps, dtype=np.float64)
        object.__setattr__(self, "amps", amps.reshape(len(self.dirs), -1))

    @property
    def size(self) -> int:
        return self.dirs.shape[0]

    @property
    def channels(self) -> int:
        return self.amps.shape[1]

    @property
    def alpha(self) -> np.ndarray:
        return softplus(self.alpha_raw)

    @property
    def beta(self) -> np.ndarray:
        return softplus(self.beta_raw)

    def rows(self) -> np.ndarray:
        return np.concatenate([self.dirs, self.alpha_raw[:, None], self.beta_raw[:, None], self.amps], axis=1)

    def vector(self) -> np.ndarray:
        return self.rows().ravel()

    def with_vector(self, v) -> "SbParams":
        r = np.asarray(v, dtype=np.float64).reshape(self.size, -1)
        return SbParams(r[:, :3], r[:, 3], r[:, 4], r[:, 5:])

    def _lobes(self, dirs):
        unit = normalize(self.dirs)
        cosang = dirs @ unit.T
        a = np.maximum(1.0 + cosang, SB_BASE_FLOOR)
        b = np.maximum(1.0 - cosang, SB_BASE_FLOOR)
        alpha, beta = self.alpha, self.beta
        la, lb = np.log(a), np.log(b)
        v = np.exp((alpha - 1.0) * la + (beta - 1.0) * lb)
        return unit, cosang, a, b, la, lb, v

    def evaluate(self, dirs) -> np.ndarray:
        dirs = np.atleast_2d(dirs)
        v = self._lobes(dirs)[-1]
        return v @ self.amps

    def grad(self, dirs, upstream) -> np.ndarray:
        dirs = np.atleast_2d(dirs)
        u = _as_upstream(upstream, self.channels)
        unit, cosang, a, b, la, lb, v = self._lobes(dirs)
        alpha, beta = self.alpha, self.beta
        g_amp = v.T @ u
        h = (u @ self.amps.T) * v  # d/d(log v)
        g_araw = np.sum(h * la, axis=0) * sigmoid(self.alpha_raw)
        g_braw = np.sum(h * lb, axis=0) * sigmoid(self.beta_raw)
        # clamped bases contribute no slope
        da = np.where(1.0 + cosang > SB_BASE_FLOOR, (alpha - 1.0) / a, 0.0)
        db = np.where(1.0 - cosang > SB_BASE_FLOOR, (beta - 1.0) / b, 0.0)
        g_unit = (h * (da - db)).T @ dirs
        g_dir = _tangent(g_unit, self.dirs, unit)
        return np.concatenate([g_dir, g_araw[:, None], g_braw[:, None], g_amp], axis=1).ravel()


# ---------------------------------------------------------------------------
# Spherical Voronoi


@dataclass(frozen=True)
class SvParams:
    """Soft spherical Voronoi: softmax over per-site logits blends site values.

    ``mode="explicit"`` keeps a learned ``log_tau`` per site and uses only the
    direction of ``sites``. ``mode="norm"`` drops ``log_tau``; the length of
    each site vector is its temperature.
    """

    sites: np.ndarray  # (K, 3)
    values: np.ndarray  # (K, C)
    log_tau: np.ndarray | None = None  # (K,), explicit mode only
    mode: str = "norm"
    kind: str = field(default="sv", init=False)

    def __post_init__(self):
        if self.mode not in SV_MODES:
            raise ValueError(f"unknown SV mode {self.mode!r}")
        sites = np.asarray(self.sites, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64).reshape(len(sites), -1))
        if self.mode == "explicit":
            lt = np.zeros(len(sites)) if self.log_tau is None else self.log_tau
            object.__setattr__(self, "log_tau", np.asarray(lt, dtype=np.float64).reshape(-1))
        else:
            object.__setattr__(self, "log_tau", None)

    @property
    def size(self) -> int:
        return self.sites.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def unit_sites(self) -> np.ndarray:
        return normalize(self.sites)

    @property
    def tau(self) -> np.ndarray:
        if self.mode == "norm":
            return np.linalg.norm(self.sites, axis=1)
        return np.exp(self.log_tau)

    def rows(self) -> np.ndarray:
        cols = [self.sites]
        if self.mode == "explicit":
            cols.append(self.log_tau[:, None])
        cols.append(self.values)
        return np.concatenate(cols, axis=1)

    def vector(self) -> np.ndarray:
        return self.rows().ravel()

    def with_vector(self, v) -> "SvParams":
        r = np.asarray(v, dtype=np.float64).reshape(self.size, -1)
        if self.mode == "explicit":
            return SvParams(r[:, :3], r[:, 4:], r[:, 3], mode="explicit")
        return SvParams(r[:, :3], r[:, 3:], mode="norm")

    def logits(self, dirs, tau=None) -> np.ndarray:
        """Per-site logits ``tau_k (s_k_hat . w)``, shape ``(n, K)``.

        ``tau`` overrides every site's temperature; a scalar or one value per
        direction.
        """
        dirs = np.atleast_2d(dirs)
        if tau is not None:
            tau = np.asarray(tau, dtype=np.float64)
            return (dirs @ self.unit_sites.T) * (tau[:, None] if tau.ndim else tau)
        if self.mode == "norm":
            return dirs @ self.sites.T
        return (dirs @ self.unit_sites.T) * self.tau

    def weights(self, dirs, tau=None) -> np.ndarray:
        return softmax(self.logits(dirs, tau), axis=1)

    def evaluate(self, dirs, tau=None) -> np.ndarray:
        return self.weights(dirs, tau) @ self.values

    def grad(self, dirs, upstream, tau=None) -> np.ndarray:
        dirs = np.atleast_2d(dirs)
        u = _as_upstream(upstream, self.channels)
        logits = self.logits(dirs, tau)
        w = softmax(logits, axis=1)
        f = w @ self.values
        g_val = w.T @ u
        g_logit = w * (u @ self.values.T - np.sum(u * f, axis=1, keepdims=True))
        cols = []
        if tau is None and self.mode == "norm":
            cols.append(g_logit.T @ dirs)
        else:
            unit = self.unit_sites
            if tau is None:
                scale = self.tau[:, None]
                g_unit = scale * (g_logit.T @ dirs)
            else:
                t = np.asarray(tau, dtype=np.float64)
                g_unit = (g_logit * (t[:, None] if t.ndim else t)).T @ dirs
            cols.append(_tangent(g_unit, self.sites, unit))
            if self.mode == "explicit":
                g_lt = np.sum(g_logit * logits, axis=0) if tau is None else np.zeros(self.size)
                cols.append(g_lt[:, None])
        cols.append(g_val)
        return np.concatenate(cols, axis=1).ravel()


SphericalModel = Union[ShParams, SgParams, SbParams, SvParams]


def _as_upstream(upstream, channels: int) -> np.ndarray:
    u = np.asarray(upstream, dtype=np.float64)
    if u.ndim == 1:
        u = u[None, :] if u.size == channels else u[:, None]
    return u


# ---------------------------------------------------------------------------
# Module-level entry points


def evaluate(model: SphericalModel, dirs) -> np.ndarray:
    """Evaluate any model at one direction ``(3,)`` or many ``(n, 3)``."""
    _check_finite(model.vector())
    d = np.asarray(dirs, dtype=np.float64)
    out = model.evaluate(np.atleast_2d(d))
    return out[0] if d.ndim == 1 else out


def gradient(model: SphericalModel, dirs, upstream) -> np.ndarray:
    """Gradient of ``sum_i <upstream_i, f(dirs_i)>`` w.r.t. ``model.vector()``."""
    _check_finite(model.vector())
    return model.grad(np.atleast_2d(np.asarray(dirs, dtype=np.float64)), upstream)


def sv_weights(params: SvParams, dirs) -> np.ndarray:
    d = np.asarray(dirs, dtype=np.float64)
    w = params.weights(np.atleast_2d(d))
    return w[0] if d.ndim == 1 else w


def param_count(model: SphericalModel) -> int:
    return int(model.vector().size)


def row_width(kind: str, channels: int, mode: str = "norm") -> int:
    return {
        "sh": channels,
        "sg": 4 + channels,
        "sb": 5 + channels,
        "sv": (3 if mode == "norm" else 4) + channels,
    }[kind]


def count_for(kind: str, size: int, channels: int, mode: str = "norm") -> int:
    rows = sh_count(size) if kind == "sh" else size
    return rows * row_width(kind, channels, mode)


def size_for_budget(kind: str, budget: int, channels: int, mode: str = "norm") -> int:
    """Largest degree (SH) or lobe count whose parameter count fits ``budget``."""
    size = 0 if kind == "sh" else 1
    if count_for(kind, size, channels, mode) > budget:
        raise ValueError(f"budget {budget} too small for a single {kind} term")
    while count_for(kind, size + 1, channels, mode) <= budget:
        size += 1
    return size


def preset_sv8(channels: int = 3, tau: float = 10.0, rotation: float = 0.0) -> SvParams:
    """8 Fibonacci-placed norm-mode sites with zero values: 48 params at C=3."""
    sites = fibonacci_sphere(8, rotation) * tau
    return SvParams(sites, np.zeros((8, channels)), mode="norm")


def random_model(
    kind: str,
    size: int,
    channels: int,
    rng: np.random.Generator,
    mode: str = "norm",
    tau_range=(0.5, 20.0),
    value_std: float = 0.5,
) -> SphericalModel:
    """Random initialization used by the restart experiments.

    Directions are uniform on the sphere, values/amplitudes ``N(0, value_std^2)``
    and temperatures log-uniform over ``tau_range``. SB shape parameters draw
    alpha from the same log-uniform range and beta log-uniform on [1, 2].
    """
    lo, hi = np.log(tau_range[0]), np.log(tau_range[1])
    if kind == "sh":
        return ShParams(rng.normal(0.0, value_std, (sh_count(size), channels)))
    dirs = random_dirs(rng, size)
    vals = rng.normal(0.0, value_std, (size, channels))
    log_tau = rng.uniform(lo, hi, size)
    if kind == "sg":
        return SgParams(dirs, log_tau, vals)
    if kind == "sb":
        alpha = np.exp(log_tau)
        beta = np.exp(rng.uniform(0.0, np.log(2.0), size))
        return SbParams(dirs, softplus_inv(alpha), softplus_inv(beta), vals)
    if kind == "sv":
        if mode == "norm":
            return SvParams(dirs * np.exp(log_tau)[:, None], vals, mode="norm")
        return SvParams(dirs, vals, log_tau, mode="explicit")
    raise ValueError(f"unknown model kind {kind!r}")


def zero_model(kind: str, size: int, channels: int, mode: str = "norm", tau: float = 10.0) -> SphericalModel:
    """Deterministic starting point: Fibonacci lobe axes, zero amplitudes."""
    if kind == "sh":
        return ShParams.zeros(size, channels)
    dirs = fibonacci_sphere(size)
    zeros = np.zeros((size, channels))
    lt = np.full(size, math.log(tau))
    if kind == "sg":
        return SgParams(dirs, lt, zeros)
    if kind == "sb":
        return SbParams(dirs, softplus_inv(np.full(size, tau)), softplus_inv(np.ones(size)), zeros)
    if kind == "sv":
        if mode == "norm":
            return SvParams(dirs * tau, zeros, mode="norm")
        return SvParams(dirs, zeros, lt, mode="explicit")
    raise ValueError(f"unknown model kind {kind!r}")


def rotate_model(model: SphericalModel, rot: np.ndarray) -> SphericalModel:
    """Apply a rotation matrix to every lobe axis / site (not defined for SH)."""
    if isinstance(model, SvParams):
        return replace(model, sites=model.sites @ rot.T)
    if isinstance(model, (SgParams, SbParams)):
        return replace(model, dirs=model.dirs @ rot.T)
    raise TypeError("SH rotation is not supported")


# ---------------------------------------------------------------------------
# Model files

MODEL_MAGIC = "SVMODEL 1"


def format_model(model: SphericalModel) -> str:
    lines = [MODEL_MAGIC, f"kind {model.kind}", f"channels {model.channels}"]
    if model.kind == "sh":
        lines.append(f"degree {model.degree}")
    else:
        lines.append(f"count {model.size}")
    if model.kind == "sv":
        lines.append(f"mode {'norm' if model.mode == 'norm' else 'explicit'}")
    for row in model.rows():
        lines.append(" ".join(repr(float(x)) for x in row))
    return "\n".join(lines) + "\n"


def parse_model(text: str, start: int = 0) -> tuple[SphericalModel, int]:
    """Parse a model block from ``text.splitlines()[start:]``.

    Returns the model and the index of the first line after the block, so
    callers embedding models in larger files can continue from there.
    """
    lines = text.splitlines()
    i = start
    if lines[i].strip() != MODEL_MAGIC:
        raise ValueError(f"bad model header {lines[i]!r}")
    kind = lines[i + 1].split()[1]
    channels = int(lines[i + 2].split()[1])
    key, val = lines[i + 3].split()
    size = int(val)
    i += 4
    mode = "norm"
    if kind == "sv":
        mode = lines[i].split()[1]
        i += 1
    nrows = sh_count(size) if kind == "sh" else size
    rows = np.array([[float(t) for t in lines[i + r].split()] for r in range(nrows)]).reshape(nrows, -1)
    i += nrows
    if rows.shape[1] != row_width(kind, channels, mode):
        raise ValueError(f"row width {rows.shape[1]} does not match {kind} with {channels} channels")
    if kind == "sh":
        model = ShParams(rows)
    elif kind == "sg":
        model = SgParams(rows[:, :3], rows[:, 3], rows[:, 4:])
    elif kind == "sb":
        model = SbParams(rows[:, :3], rows[:, 3], rows[:, 4], rows[:, 5:])
    elif kind == "sv" and mode == "explicit":
        model = SvParams(rows[:, :3], rows[:, 4:], rows[:, 3], mode="explicit")
    elif kind == "sv":
        model = SvParams(rows[:, :3], rows[:, 3:], mode="norm")
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return model, i


def save_model(path, model: SphericalModel) -> None:
    with open(path, "w") as f:
        f.write(format_model(model))


def load_model(path) -> SphericalModel:
    with open(path) as f:
        return parse_model(f.read())[0]
