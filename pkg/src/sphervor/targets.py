"""Code-defined spherical targets, so experiments need no downloaded assets.

Names accepted by :func:`builtin`:

``cells2``, ``cells4``
    Piecewise-constant RGB Voronoi partitions (an SV with temperature 1e6).
``glint5deg``
    White cap of 5 degree radius, 1 inside and 0 outside.
``const<value>``
    Constant on every channel, e.g. ``const0.3``.
``shmixL2``
    Fixed random mixture of real SH up to degree 2, offset to stay positive.
``smoothsv``
    Low-temperature SV (tau = 2), a smooth blob target.
"""

from __future__ import annotations

import math

import numpy as np

from .bases import ShParams, SvParams, sh_count
from .sphere import normalize

HARD_TAU = 1e6
GLINT_AXIS = normalize(np.array([0.3, -0.2, 0.93]))

_CELL_SITES = {
    "cells2": normalize(np.array([[0.8, 0.3, 0.5], [-0.4, 0.7, -0.6]])),
    "cells4": normalize(
        np.array(
            [
                [0.9, 0.2, 0.4],
                [-0.5, 0.8, 0.1],
                [-0.3, -0.7, 0.6],
                [0.1, -0.2, -0.95],
            ]
        )
    ),
}
_CELL_COLORS = {
    "cells2": np.array([[0.9, 0.25, 0.1], [0.1, 0.35, 0.8]]),
    "cells4": np.array(
        [
            [0.9, 0.25, 0.1],
            [0.1, 0.35, 0.8],
            [0.2, 0.75, 0.3],
            [0.85, 0.8, 0.2],
        ]
    ),
}


def voronoi_target(name: str) -> SvParams:
    sites = _CELL_SITES[name]
    return SvParams(sites, _CELL_COLORS[name], np.full(len(sites), math.log(HARD_TAU)), mode="explicit")


def glint(dirs, axis=GLINT_AXIS, radius_deg: float = 5.0, channels: int = 3) -> np.ndarray:
    dirs = np.atleast_2d(dirs)
    inside = dirs @ axis >= math.cos(math.radians(radius_deg))
    return np.repeat(inside.astype(np.float64)[:, None], channels, axis=1)


def shmix(degree: int = 2, seed: int = 7, channels: int = 3) -> ShParams:
    rng = np.random.default_rng(seed)
    c = rng.normal(0.0, 0.15, (sh_count(degree), channels))
    c[0] = 0.5 * 2.0 * math.sqrt(math.pi)  # mean level 0.5
    return ShParams(c)


def smooth_sv(channels: int = 3) -> SvParams:
    sites = normalize(np.array([[0.0, 0.0, 1.0], [0.9, 0.1, -0.3], [-0.5, -0.8, -0.2]]))
    vals = np.array([[0.8, 0.6, 0.4], [0.2, 0.3, 0.6], [0.4, 0.7, 0.3]])[:, :channels]
    return SvParams(sites, vals, np.full(3, math.log(2.0)), mode="explicit")


def builtin(name: str):
    """Return ``fn(dirs (n, 3)) -> (n, C)`` for a builtin target name."""
    if name in _CELL_SITES:
        model = voronoi_target(name)
        return model.evaluate
    if name == "glint5deg":
        return glint
    if name.startswith("const"):
        try:
            value = float(name[5:])
        except ValueError:
            raise ValueError(f"bad constant target {name!r}") from None
        return lambda d: np.full((np.atleast_2d(d).shape[0], 3), value)
    if name == "shmixL2":
        return shmix().evaluate
    if name == "smoothsv":
        return smooth_sv().evaluate
    raise ValueError(f"unknown builtin target {name!r}")


BUILTIN_NAMES = ("cells2", "cells4", "glint5deg", "const<value>", "shmixL2", "smoothsv")
