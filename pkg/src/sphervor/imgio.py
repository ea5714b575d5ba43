"""PFM and binary PPM readers/writers.

Arrays are ``(height, width, channels)`` with row 0 at the top. PFM stores
rows bottom-up, so both directions flip on the way through.
"""

from __future__ import annotations

import os

import numpy as np

from .sphere import FACE_NAMES, CubeMap, EquirectMap

GAMMA = 2.2


def _read_token(f) -> bytes:
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            return tok
        if c == b"#" and not tok:
            f.readline()
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def write_pfm(path, image, little_endian: bool = True) -> None:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError(f"PFM holds 1 or 3 channels, got {c}")
    header = b"PF\n" if c == 3 else b"Pf\n"
    scale = -1.0 if little_endian else 1.0
    dtype = "<f4" if little_endian else ">f4"
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode())
        f.write(f"{scale}\n".encode())
        f.write(np.ascontiguousarray(img[::-1]).astype(dtype).tobytes())


def read_pfm(path) -> np.ndarray:
    """Returns ``(H, W, C)`` float64, top row first."""
    with open(path, "rb") as f:
        kind = _read_token(f)
        if kind == b"PF":
            c = 3
        elif kind == b"Pf":
            c = 1
        else:
            raise ValueError(f"{path}: not a PFM file (header {kind!r})")
        w = int(_read_token(f))
        h = int(_read_token(f))
        scale = float(_read_token(f))
        dtype = "<f4" if scale < 0 else ">f4"
        raw = np.frombuffer(f.read(w * h * c * 4), dtype=dtype)
    if raw.size != w * h * c:
        raise ValueError(f"{path}: truncated PFM data")
    img = raw.reshape(h, w, c)[::-1].astype(np.float64)
    if abs(scale) != 1.0:
        img = img * abs(scale)
    return img


def to_srgb8(image, gamma: float = GAMMA) -> np.ndarray:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(255.0 * img ** (1.0 / gamma)).astype(np.uint8)


def write_ppm(path, image, gamma: float = GAMMA) -> None:
    """Clamp linear radiance to [0, 1], gamma-encode, and write 8-bit P6."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    h, w, _ = img.shape
    data = to_srgb8(img[:, :, :3], gamma) if gamma else np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path, gamma: float = GAMMA) -> np.ndarray:
    """Read 8-bit P6 and decode to linear radiance with a power-law gamma."""
    with open(path, "rb") as f:
        if _read_token(f) != b"P6":
            raise ValueError(f"{path}: not a binary PPM")
        w = int(_read_token(f))
        h = int(_read_token(f))
        maxval = int(_read_token(f))
        if maxval != 255:
            raise ValueError(f"{path}: only maxval 255 is supported")
        raw = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    img = raw.reshape(h, w, 3).astype(np.float64) / 255.0
    return img**gamma


def load_equirect(path) -> EquirectMap:
    path = os.fspath(path)
    if path.lower().endswith(".ppm"):
        return EquirectMap(read_ppm(path))
    return EquirectMap(read_pfm(path))


def write_cubemap(prefix, cmap: CubeMap, stacked: bool = False) -> list[str]:
    """Write six ``<prefix>_px.pfm`` ... files, or one vertically stacked PFM."""
    prefix = os.fspath(prefix)
    if stacked:
        path = prefix if prefix.endswith(".pfm") else prefix + ".pfm"
        write_pfm(path, cmap.data.reshape(6 * cmap.face_res, cmap.face_res, cmap.channels))
        return [path]
    paths = []
    for f, name in enumerate(FACE_NAMES):
        p = f"{prefix}_{name}.pfm"
        write_pfm(p, cmap.data[f])
        paths.append(p)
    return paths


def read_cubemap(path_or_prefix) -> CubeMap:
    """Read a stacked cube PFM (height = 6 * width) or six suffixed faces."""
    p = os.fspath(path_or_prefix)
    if os.path.isfile(p):
        img = read_pfm(p)
        h, w, c = img.shape
        if h != 6 * w:
            raise ValueError(f"{p}: stacked cubemap must be 6 faces tall, got {w}x{h}")
        return CubeMap(img.reshape(6, w, w, c))
    if p.endswith(".pfm"):
        p = p[:-4]
    faces = [read_pfm(f"{p}_{name}.pfm") for name in FACE_NAMES]
    return CubeMap(np.stack(faces))


def load_envmap(path, face_res: int) -> CubeMap:
    """Load either an equirect image (resampled to a cubemap) or a cubemap."""
    p = os.fspath(path)
    if os.path.isfile(p) and p.lower().endswith(".pfm"):
        img = read_pfm(p)
        h, w, _ = img.shape
        if w == 2 * h:
            return CubeMap.from_equirect(EquirectMap(img), face_res)
        return read_cubemap(p)
    if os.path.isfile(p) and p.lower().endswith(".ppm"):
        return CubeMap.from_equirect(load_equirect(p), face_res)
    return read_cubemap(p)

