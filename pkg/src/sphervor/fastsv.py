"""Cubemap-indexed truncated softmax for SV models with many sites.

Each texel of a coarse cubemap keeps the ``m`` sites whose unit directions
have the largest dot product with the texel center. A query looks up its
texel and runs the softmax over those candidates only, renormalizing the
weights over the candidate set. With ``m = K`` this is the full evaluator.

The index is forward-only: gradients go through :mod:`sphervor.bases`.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np

from .bases import SvParams, softmax
from .sphere import dir_to_texel, random_dirs, texel_center_dirs, texel_index

HASH_QUANTUM = 1e-7


class StaleIndexError(RuntimeError):
    """The site set changed since the candidate index was built."""


def site_hash(params: SvParams) -> str:
    q = np.round(params.sites / HASH_QUANTUM).astype(np.int64)
    return hashlib.sha256(q.tobytes()).hexdigest()


@dataclass(frozen=True)
class CandidateIndex:
    face_res: int
    m: int
    table: np.ndarray  # (6 * face_res^2, m) site ids
    built_for: str
    rebuild_interval: int = 500

    @property
    def texels(self) -> int:
        return self.table.shape[0]


def topk_sites(unit_sites: np.ndarray, dirs: np.ndarray, m: int, chunk: int = 4096) -> np.ndarray:
    """Indices of the ``m`` largest ``site . dir``; ties go to the lower index."""
    out = np.empty((dirs.shape[0], m), dtype=np.int64)
    for i in range(0, dirs.shape[0], chunk):
        dots = dirs[i : i + chunk] @ unit_sites.T
        out[i : i + chunk] = np.argsort(-dots, axis=1, kind="stable")[:, :m]
    return out


def build_index(params: SvParams, face_res: int = 16, m: int = 8, rebuild_interval: int = 500, verify: int = 32):
    """Precompute per-texel TopK candidate lists.

    ``verify`` texels, spread evenly over the table, are re-derived with a
    plain Python sort as a guard against indexing slips.
    """
    K = params.size
    if not 1 <= m <= K:
        raise ValueError(f"candidate count m={m} must be in [1, {K}]")
    if face_res < 1:
        raise ValueError("face_res must be >= 1")
    unit = params.unit_sites
    centers = texel_center_dirs(face_res)
    table = topk_sites(unit, centers, m)
    for t in np.linspace(0, len(centers) - 1, min(verify, len(centers))).astype(int):
        dots = unit @ centers[t]
        ref = sorted(range(K), key=lambda k: (-dots[k], k))[:m]
        if list(table[t]) != ref:
            raise AssertionError(f"candidate table mismatch at texel {t}")
    table.setflags(write=False)
    return CandidateIndex(face_res, m, table, site_hash(params), rebuild_interval)


def candidates_for(index: CandidateIndex, dirs) -> np.ndarray:
    f, i, j = dir_to_texel(dirs, index.face_res)
    return index.table[texel_index(f, i, j, index.face_res)]


def truncated_weights(params: SvParams, index: CandidateIndex, dirs, tau=None, check: bool = True):
    """Candidate ids ``(n, m)`` and their renormalized softmax weights."""
    if check and site_hash(params) != index.built_for:
        raise StaleIndexError("candidate index was built for a different site set")
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    cand = candidates_for(index, dirs)
    if tau is None and params.mode == "norm":
        logits = np.einsum("nmk,nk->nm", params.sites[cand], dirs)
    else:
        dots = np.einsum("nmk,nk->nm", params.unit_sites[cand], dirs)
        if tau is None:
            logits = dots * params.tau[cand]
        else:
            t = np.asarray(tau, dtype=np.float64)
            logits = dots * (t[:, None] if t.ndim else t)
    return cand, softmax(logits, axis=1)


def eval_truncated(params: SvParams, index: CandidateIndex, dirs, tau=None, check: bool = True) -> np.ndarray:
    d = np.asarray(dirs, dtype=np.float64)
    cand, w = truncated_weights(params, index, d, tau, check)
    out = np.einsum("nm,nmc->nc", w, params.values[cand])
    return out[0] if d.ndim == 1 else out


def maybe_rebuild(index: CandidateIndex, params: SvParams, step: int, check_hash: bool = True) -> CandidateIndex:
    """Fresh index on rebuild steps or when the sites moved; else the input."""
    due = index.rebuild_interval > 0 and step % index.rebuild_interval == 0
    stale = check_hash and site_hash(params) != index.built_for
    if due or stale:
        return build_index(params, index.face_res, index.m, index.rebuild_interval)
    return index


def _throughput(fn, n: int, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return n / best


def bench_eval(params: SvParams, configs, n_dirs: int = 10_000, seed: int = 0, repeats: int = 3):
    """Error and throughput of truncated evaluation for each ``(res, m)``.

    Returns ``(rows, full_evals_per_sec)``; each row is a dict with keys
    ``res, m, max_err, mean_err, evals_per_sec``. Errors are absolute,
    against the full evaluator on the same random directions.
    """
    dirs = random_dirs(np.random.default_rng(seed), n_dirs)
    full = params.evaluate(dirs)
    full_rate = _throughput(lambda: params.evaluate(dirs), n_dirs, repeats)
    rows = []
    for res, m in configs:
        index = build_index(params, res, m)
        approx = eval_truncated(params, index, dirs)
        err = np.abs(approx - full)
        rate = _throughput(lambda: eval_truncated(params, index, dirs), n_dirs, repeats)
        rows.append(
            {
                "res": int(res),
                "m": int(m),
                "max_err": float(err.max()),
                "mean_err": float(err.mean()),
                "evals_per_sec": rate,
            }
        )
    return rows, full_rate
