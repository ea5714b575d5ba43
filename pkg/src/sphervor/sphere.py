"""Spherical geometry: unit directions, samplers, and the image parameterizations.

Directions are plain ``float64`` arrays with a trailing axis of length 3.
Every function here accepts a single direction ``(3,)`` or a batch ``(..., 3)``.

Conventions
-----------
Equirectangular: ``theta`` is measured from the +Z pole, pixel ``(u, v)``
has its center at ``theta = pi (v + 0.5) / H`` and
``phi = 2 pi (u + 0.5) / W - pi``, with ``x = sin(theta) cos(phi)``,
``y = sin(theta) sin(phi)``, ``z = cos(theta)``.

Cubemap: faces ordered +X, -X, +Y, -Y, +Z, -Z with the usual OpenGL
``(sc, tc, ma)`` selection. Texel ``(i, j)`` of a face of resolution ``r``
sits at ``s = 2 (i + 0.5) / r - 1``, ``t = 2 (j + 0.5) / r - 1``; ``i``
indexes columns, ``j`` rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FACE_NAMES = ("px", "nx", "py", "ny", "pz", "nz")
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def normalize(v):
    """Scale vectors to unit length along the last axis."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("cannot normalize a zero vector")
    return v / n


def as_dirs(v):
    """Coerce input to an ``(n, 3)`` array of unit directions."""
    return normalize(np.atleast_2d(np.asarray(v, dtype=np.float64)))


def fibonacci_sphere(n: int, rotation: float = 0.0) -> np.ndarray:
    """Golden-angle spiral lattice of ``n`` directions.

    Points are placed at ``z_i = 1 - (2 i + 1) / n`` and azimuth
    ``i * golden_angle + rotation``. ``n = 1`` is special-cased to the +Z pole.
    The optional ``rotation`` spins the whole lattice about Z, which is how
    restarts get distinct but equally uniform site layouts.
    """
    if n < 1:
        raise ValueError(f"fibonacci_sphere needs n >= 1, got {n}")
    if n == 1:
        return np.array([[0.0, 0.0, 1.0]])
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * GOLDEN_ANGLE + rotation
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    return normalize(pts)


def random_dirs(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform random directions (normalized Gaussian vectors)."""
    return normalize(rng.standard_normal((n, 3)))


def reflect(view, normal):
    """Mirror ``view`` about ``normal``: ``2 (v . n) n - v``.

    ``view`` points away from the surface (toward the eye).
    """
    view = np.asarray(view, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    d = np.sum(view * normal, axis=-1, keepdims=True)
    return 2.0 * d * normal - view


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    k = normalize(axis)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)


def angle_between(a, b):
    a = normalize(a)
    b = normalize(b)
    return np.arccos(np.clip(np.sum(a * b, axis=-1), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Equirectangular maps


@dataclass(frozen=True)
class EquirectMap:
    """Lat-long image, ``data`` shaped ``(height, width, channels)``."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValueError("equirect data must be (H, W) or (H, W, C)")
        h, w, _ = data.shape
        if w != 2 * h:
            raise ValueError(f"equirect width must be 2*height, got {w}x{h}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def pixel_dirs(self) -> np.ndarray:
        """Directions of all pixel centers, ``(H, W, 3)``."""
        v = np.arange(self.height) + 0.5
        u = np.arange(self.width) + 0.5
        theta = math.pi * v / self.height
        phi = 2.0 * math.pi * u / self.width - math.pi
        th, ph = np.meshgrid(theta, phi, indexing="ij")
        return angles_to_dir(th, ph)

    @classmethod
    def from_function(cls, fn, height: int) -> "EquirectMap":
        """Tabulate ``fn(dirs (n,3)) -> (n, C)`` at pixel centers."""
        dirs = cls(np.zeros((height, 2 * height, 1))).pixel_dirs()
        vals = np.asarray(fn(dirs.reshape(-1, 3)))
        return cls(vals.reshape(height, 2 * height, -1))


def angles_to_dir(theta, phi):
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def dir_to_angles(dirs):
    dirs = np.asarray(dirs, dtype=np.float64)
    theta = np.arccos(np.clip(dirs[..., 2], -1.0, 1.0))
    phi = np.arctan2(dirs[..., 1], dirs[..., 0])
    return theta, phi


def equirect_sample(emap: EquirectMap, dirs) -> np.ndarray:
    """Bilinear lookup with longitude wrap and pole clamping.

    Within half a pixel of a pole the lookup blends toward the mean of the
    first (or last) row, which sits exactly at the pole. That keeps the
    sampled field single-valued at the poles.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    single = dirs.ndim == 1
    dirs = np.atleast_2d(dirs)
    h, w = emap.height, emap.width
    theta, phi = dir_to_angles(dirs)
    # continuous pixel coordinates where integer + 0.5 is a center
    x = (phi + math.pi) / (2.0 * math.pi) * w - 0.5
    y = theta / math.pi * h - 0.5
    x0 = np.floor(x)
    fx = x - x0
    x0 = x0.astype(np.int64)
    x1 = (x0 + 1) % w
    x0 %= w
    d = emap.data

    def row(r):
        return d[r, x0] * (1.0 - fx)[:, None] + d[r, x1] * fx[:, None]

    yc = np.clip(y, 0.0, h - 1.0)
    y0 = np.floor(yc).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    fy = (yc - y0)[:, None]
    out = row(y0) * (1.0 - fy) + row(y1) * fy

    north = y < 0.0
    if np.any(north):
        a = (-2.0 * y[north])[:, None]  # 0 at the first row center, 1 at the pole
        out[north] = (1.0 - a) * out[north] + a * d[0].mean(axis=0)
    south = y > h - 1.0
    if np.any(south):
        a = (2.0 * (y[south] - (h - 1.0)))[:, None]
        out[south] = (1.0 - a) * out[south] + a * d[h - 1].mean(axis=0)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Cubemaps


def face_st_to_dir(face, s, t):
    """Unnormalized direction for face coordinates ``s, t`` in [-1, 1]."""
    face = np.asarray(face)
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    face, s, t = np.broadcast_arrays(face, s, t)
    one = np.ones_like(s)
    x = np.select(
        [face == 0, face == 1, face == 2, face == 3, face == 4, face == 5],
        [one, -one, s, s, s, -s],
    )
    y = np.select(
        [face == 0, face == 1, face == 2, face == 3, face == 4, face == 5],
        [-t, -t, one, -one, -t, -t],
    )
    z = np.select(
        [face == 0, face == 1, face == 2, face == 3, face == 4, face == 5],
        [-s, s, t, -t, one, -one],
    )
    return np.stack([x, y, z], axis=-1)


def dir_to_face_st(dirs):
    """Dominant-axis face selection; returns ``(face, s, t)`` arrays."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    ax, ay, az = np.abs(x), np.abs(y), np.abs(z)
    use_x = (ax >= ay) & (ax >= az)
    use_y = ~use_x & (ay >= az)
    use_z = ~use_x & ~use_y
    face = np.where(use_x, np.where(x >= 0, 0, 1), np.where(use_y, np.where(y >= 0, 2, 3), np.where(z >= 0, 4, 5)))
    ma = np.where(use_x, ax, np.where(use_y, ay, az))
    sc = np.select(
        [face == 0, face == 1, face == 2, face == 3, face == 4, face == 5],
        [-z, z, x, x, x, -x],
    )
    tc = np.select(
        [face == 0, face == 1, face == 2, face == 3, face == 4, face == 5],
        [-y, -y, z, -z, -y, -y],
    )
    return face, sc / ma, tc / ma


def dir_to_texel(dirs, face_res: int):
    """Map directions to ``(face, i, j)`` integer texel coordinates."""
    face, s, t = dir_to_face_st(dirs)
    i = np.clip(np.floor((s + 1.0) * 0.5 * face_res), 0, face_res - 1).astype(np.int64)
    j = np.clip(np.floor((t + 1.0) * 0.5 * face_res), 0, face_res - 1).astype(np.int64)
    return face.astype(np.int64), i, j


def texel_index(face, i, j, face_res: int):
    """Flat texel id ``face * r^2 + j * r + i``."""
    return (np.asarray(face) * face_res + np.asarray(j)) * face_res + np.asarray(i)


def texel_center_dirs(face_res: int) -> np.ndarray:
    """Unit directions of all texel centers in flat-id order, ``(6 r^2, 3)``."""
    c = 2.0 * (np.arange(face_res) + 0.5) / face_res - 1.0
    tt, ss = np.meshgrid(c, c, indexing="ij")  # row j, column i
    out = []
    for f in range(6):
        out.append(face_st_to_dir(f, ss, tt).reshape(-1, 3))
    return normalize(np.concatenate(out, axis=0))


@dataclass(frozen=True)
class CubeMap:
    """Six square faces, ``data`` shaped ``(6, res, res, channels)``.

    ``data[f, j, i]`` is texel ``(i, j)`` of face ``f``.
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4 or data.shape[0] != 6 or data.shape[1] != data.shape[2]:
            raise ValueError(f"cubemap data must be (6, r, r, C), got {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def face_res(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def flat(self) -> np.ndarray:
        """View of the texels as ``(6 r^2, C)`` in flat-id order."""
        return self.data.reshape(-1, self.channels)

    @classmethod
    def constant(cls, face_res: int, value) -> "CubeMap":
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        return cls(np.broadcast_to(value, (6, face_res, face_res, value.size)).copy())

    @classmethod
    def from_function(cls, fn, face_res: int) -> "CubeMap":
        dirs = texel_center_dirs(face_res)
        vals = np.asarray(fn(dirs), dtype=np.float64).reshape(6, face_res, face_res, -1)
        return cls(vals)

    @classmethod
    def from_equirect(cls, emap: EquirectMap, face_res: int) -> "CubeMap":
        return cls.from_function(lambda d: equirect_sample(emap, d), face_res)


def cubemap_sample(cmap: CubeMap, dirs, bilinear: bool = False) -> np.ndarray:
    """Look up radiance along ``dirs``; nearest texel by default.

    Bilinear filtering stays inside the selected face (edge texels are
    clamped rather than blended with the neighbouring face).
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    single = dirs.ndim == 1
    dirs = np.atleast_2d(dirs)
    r = cmap.face_res
    if not bilinear:
        f, i, j = dir_to_texel(dirs, r)
        out = cmap.data[f, j, i]
        return out[0] if single else out
    out = np.zeros((dirs.shape[0], cmap.channels))
    for f_idx, i_idx, w in bilinear_taps(dirs, r):
        out += cmap.data[f_idx, i_idx[1], i_idx[0]] * w[:, None]
    return out[0] if single else out


def bilinear_taps(dirs, face_res: int):
    """The four ``(face, (i, j), weight)`` taps of an in-face bilinear lookup."""
    face, s, t = dir_to_face_st(dirs)
    x = np.clip((s + 1.0) * 0.5 * face_res - 0.5, 0.0, face_res - 1.0)
    y = np.clip((t + 1.0) * 0.5 * face_res - 0.5, 0.0, face_res - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, face_res - 1)
    y1 = np.minimum(y0 + 1, face_res - 1)
    return [
        (face, (x0, y0), (1 - fx) * (1 - fy)),
        (face, (x1, y0), fx * (1 - fy)),
        (face, (x0, y1), (1 - fx) * fy),
        (face, (x1, y1), fx * fy),
    ]


def nearest_neighbor_gap(dirs) -> float:
    """Largest angle from any point to its nearest neighbour (radians)."""
    dirs = normalize(dirs)
    g = np.clip(dirs @ dirs.T, -1.0, 1.0)
    np.fill_diagonal(g, -2.0)
    return float(np.max(np.arccos(np.max(g, axis=1))))
