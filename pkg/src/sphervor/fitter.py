"""Full-batch Adam fitting of spherical models, PSNR, and the restart study."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import bases, targets
from .bases import ShParams, SphericalModel
from .sphere import EquirectMap, equirect_sample, fibonacci_sphere

PSNR_SENTINEL = 300.0


class DivergedError(RuntimeError):
    """Loss went non-finite; carries the last finite iterate."""

    def __init__(self, iteration: int, last_model, loss_trace):
        super().__init__(f"loss became non-finite at iteration {iteration}")
        self.iteration = iteration
        self.last_model = last_model
        self.loss_trace = loss_trace


@dataclass(frozen=True)
class SampleSet:
    dirs: np.ndarray
    values: np.ndarray
    source: str = "explicit"

    def __post_init__(self):
        dirs = np.atleast_2d(np.asarray(self.dirs, dtype=np.float64)).copy()
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[:, None]
        vals = vals.copy()
        if dirs.shape[0] < 1 or dirs.shape[0] != vals.shape[0]:
            raise ValueError("SampleSet needs n >= 1 directions matching n value rows")
        if not np.all(np.isfinite(vals)):
            raise ValueError("SampleSet values must be finite")
        if np.max(np.abs(np.linalg.norm(dirs, axis=1) - 1.0)) > 1e-9:
            raise ValueError("SampleSet directions must be unit length")
        dirs.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "dirs", dirs)
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.dirs.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_function(cls, fn, n: int, source: str = "function") -> "SampleSet":
        dirs = fibonacci_sphere(n)
        return cls(dirs, fn(dirs), source)

    @classmethod
    def from_builtin(cls, name: str, n: int) -> "SampleSet":
        return cls.from_function(targets.builtin(name), n, f"builtin:{name}")

    @classmethod
    def from_equirect(cls, emap: EquirectMap, n: int, source: str = "equirect") -> "SampleSet":
        return cls.from_function(lambda d: equirect_sample(emap, d), n, source)


@dataclass
class FitConfig:
    iterations: int = 2000
    step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "mse"
    seed: int = 0
    log_every: int = 100
    peak: float = 1.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}")


@dataclass
class FitReport:
    final_loss: float
    final_psnr: float
    loss_trace: np.ndarray
    wall_time: float
    model: object = field(repr=False)


class Adam:
    """Adaptive-moment descent on a flat parameter vector."""

    def __init__(self, size: int, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def psnr(pred, target, peak: float = 1.0) -> float:
    if not peak > 0:
        raise ValueError("peak must be positive")
    return psnr_from_mse(mse(pred, target), peak)


def psnr_from_mse(err: float, peak: float = 1.0) -> float:
    if err == 0.0:
        return PSNR_SENTINEL
    if not math.isfinite(err):
        return -math.inf
    return min(PSNR_SENTINEL, 10.0 * math.log10(peak * peak / err))


class _Objective:
    """MSE over a SampleSet. Caches the design matrix for linear SH models."""

    def __init__(self, model: SphericalModel, data: SampleSet):
        self.data = data
        self.scale = 2.0 / data.values.size
        self.basis = bases.sh_basis(model.degree, data.dirs) if isinstance(model, ShParams) else None

    def predict(self, model) -> np.ndarray:
        if self.basis is not None:
            return self.basis @ model.coeffs
        return model.evaluate(self.data.dirs)

    def __call__(self, model):
        with np.errstate(over="ignore", invalid="ignore"):
            pred = self.predict(model)
            resid = pred - self.data.values
            loss = float(np.mean(resid * resid))
            if not math.isfinite(loss):
                return loss, None
            up = self.scale * resid
            if self.basis is not None:
                g = (self.basis.T @ up).ravel()
            else:
                g = model.grad(self.data.dirs, up)
        return loss, g


def fit(model: SphericalModel, data: SampleSet, cfg: FitConfig, callback=None) -> FitReport:
    """Minimize MSE with full-batch Adam for ``cfg.iterations`` steps.

    The returned model is the last iterate. ``loss_trace[i]`` is the loss
    before step ``i``; the trace ends with the loss of the returned model.
    ``callback(step, model, loss)`` runs every ``cfg.log_every`` steps.
    """
    if model.channels != data.channels:
        raise ValueError(f"model has {model.channels} channels, data has {data.channels}")
    bases._check_finite(model.vector())
    t0 = time.perf_counter()
    objective = _Objective(model, data)
    opt = Adam(model.vector().size, cfg.step_size, cfg.beta1, cfg.beta2, cfg.eps)
    trace = []
    vec = model.vector()
    current = model
    for it in range(cfg.iterations + 1):
        loss, g = objective(current)
        if g is None or not np.all(np.isfinite(g)):
            raise DivergedError(it, model, np.array(trace))
        trace.append(loss)
        model = current
        if callback is not None and cfg.log_every and it % cfg.log_every == 0:
            callback(it, model, loss)
        if it == cfg.iterations:
            break
        vec = opt.step(vec, g)
        current = model.with_vector(vec)
    final = trace[-1]
    return FitReport(final, psnr_from_mse(final, cfg.peak), np.array(trace), time.perf_counter() - t0, model)


# ---------------------------------------------------------------------------
# Restart study


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    size: int
    channels: int = 3
    mode: str = "norm"

    def random(self, rng: np.random.Generator):
        return bases.random_model(self.kind, self.size, self.channels, rng, self.mode)

    @property
    def param_count(self) -> int:
        return bases.count_for(self.kind, self.size, self.channels, self.mode)

    @classmethod
    def for_budget(cls, kind: str, budget: int, channels: int = 3, mode: str = "norm") -> "ModelSpec":
        return cls(kind, bases.size_for_budget(kind, budget, channels, mode), channels, mode)


@dataclass
class RestartSummary:
    spec: ModelSpec
    seeds: list
    psnrs: np.ndarray
    losses: np.ndarray
    wall_ms: np.ndarray
    failures: list

    @property
    def restarts(self) -> int:
        return len(self.psnrs)

    def stats(self) -> dict:
        ok = self.psnrs[np.isfinite(self.psnrs)]
        if ok.size == 0:
            return {"median": math.nan, "mean": math.nan, "std": math.nan, "min": math.nan, "max": math.nan}
        return {
            "median": float(np.median(ok)),
            "mean": float(np.mean(ok)),
            "std": float(np.std(ok)),
            "min": float(np.min(ok)),
            "max": float(np.max(ok)),
        }

    @property
    def median(self) -> float:
        return self.stats()["median"]

    @property
    def std(self) -> float:
        return self.stats()["std"]

    def to_json(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "params": self.spec.param_count,
            "restarts": self.restarts,
            "failures": self.failures,
            **self.stats(),
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["restart", "seed", "final_psnr", "final_loss", "wall_ms"])
            for r in range(self.restarts):
                w.writerow([r, self.seeds[r], repr(float(self.psnrs[r])), repr(float(self.losses[r])), f"{self.wall_ms[r]:.3f}"])

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)


def restart_seeds(base_seed: int, restarts: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(base_seed).generate_state(restarts)]


def _one_restart(args):
    spec, data, cfg, seed = args
    model = spec.random(np.random.default_rng(seed))
    t0 = time.perf_counter()
    try:
        rep = fit(model, data, cfg)
        return rep.final_psnr, rep.final_loss, 1e3 * (time.perf_counter() - t0), None
    except DivergedError as e:
        return -math.inf, math.inf, 1e3 * (time.perf_counter() - t0), str(e)


def restart_experiment(
    spec: ModelSpec, data: SampleSet, cfg: FitConfig, restarts: int, threads: int = 1
) -> RestartSummary:
    """Fit ``restarts`` independently seeded random inits of ``spec`` to ``data``.

    Per-restart seeds derive from ``cfg.seed``. A diverged restart is recorded
    with PSNR ``-inf`` and listed in ``failures``; it does not abort the run.
    ``threads > 1`` fans restarts out to worker processes.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    seeds = restart_seeds(cfg.seed, restarts)
    jobs = [(spec, data, cfg, s) for s in seeds]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=min(threads, restarts)) as ex:
            results = list(ex.map(_one_restart, jobs))
    else:
        results = [_one_restart(j) for j in jobs]
    psnrs = np.array([r[0] for r in results])
    losses = np.array([r[1] for r in results])
    wall = np.array([r[2] for r in results])
    failures = [{"restart": i, "seed": seeds[i], "error": r[3]} for i, r in enumerate(results) if r[3]]
    return RestartSummary(spec, seeds, psnrs, losses, wall, failures)


# ---------------------------------------------------------------------------
# Gibbs ringing


def dense_max(model: SphericalModel, n: int = 200_000, chunk: int = 8192) -> float:
    """Max of a model over a Fibonacci grid, evaluated in chunks."""
    dirs = fibonacci_sphere(n)
    best = -math.inf
    for i in range(0, n, chunk):
        best = max(best, float(np.max(model.evaluate(dirs[i : i + chunk]))))
    return best


def gibbs_demo(data: SampleSet, degree: int, cfg: FitConfig, grid: int = 200_000):
    """Fit SH of ``degree`` and measure how far it overshoots the target max."""
    if np.min(data.values) < 0.0 or np.max(data.values) > 1.0:
        raise ValueError("gibbs_demo expects targets bounded in [0, 1]")
    rep = fit(ShParams.zeros(degree, data.channels), data, cfg)
    overshoot = dense_max(rep.model, grid) - float(np.max(data.values))
    return rep, overshoot


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])


def default_threads(threads: int) -> int:
    return (os.cpu_count() or 1) if threads == 0 else threads
