"""Samplers for the variance-exploding reverse process.

``euler-ode`` is the probability-flow Euler step
    u <- u + sigma_dot(t) sigma(t) s(u, t) (t - t_next),
``euler-maruyama`` discretises the eta-family reverse SDE
    u <- u + (1 + eta^2) sigma_dot sigma s dt + eta sqrt(2 sigma_dot sigma dt) xi,
and ``heun`` adds a trapezoidal corrector to the Euler predictor (skipped on
the last step).

Batches are integrated in fixed-size chunks. Each batch member owns a
Philox stream keyed by (seed, member index) that supplies first its prior
draw and then its per-step noise, so output never depends on the number of
workers.
"""

from __future__ import annotations

import dataclasses
import math
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import rng as _rng
from .errors import SamplerError
from .schedule import NoiseSchedule, TimeGrid, karras_grid

METHODS = ("euler-ode", "euler-maruyama", "heun")
CHUNK_SIZE = 256


@dataclasses.dataclass(frozen=True)
class SamplerConfig:
    grid: TimeGrid
    eta: float = 0.0
    method: str = "euler-ode"
    seed: int = 0
    final_denoise: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown sampler method {self.method!r}; expected one of {METHODS}")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.method in ("euler-ode", "heun") and self.eta != 0:
            raise ValueError(f"{self.method} is deterministic; eta must be 0")

    @property
    def stochastic(self) -> bool:
        return self.method == "euler-maruyama" and self.eta > 0

    @classmethod
    def make(cls, schedule: NoiseSchedule, steps: int = 80, rho: float = 7.0, **kw) -> "SamplerConfig":
        return cls(grid=karras_grid(schedule, steps, rho), **kw)


class CountedScore:
    """Wraps a score function and counts calls (thread-safe)."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = 0
        self.vjp_calls = 0
        self._lock = threading.Lock()

    def __call__(self, u, t):
        with self._lock:
            self.calls += 1
        return self.fn(u, t)

    @property
    def supports_vjp(self):
        return getattr(self.fn, "supports_vjp", False)

    def vjp(self, u, t, v):
        with self._lock:
            self.vjp_calls += 1
        return self.fn.vjp(u, t, v)


def _for_rows(obj, rows: slice):
    if obj is not None and hasattr(obj, "for_rows"):
        return obj.for_rows(rows)
    return obj


def sample_prior(dim: int, schedule: NoiseSchedule, t_start: float, gen: np.random.Generator) -> np.ndarray:
    """i.i.d. N(0, sigma(t_start)^2) in ascending coordinate order."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return schedule.sigma(t_start) * gen.standard_normal(dim)


def integrate(score_fn, u: np.ndarray, schedule: NoiseSchedule, config: SamplerConfig,
              noise: np.ndarray | None = None, project=None) -> np.ndarray:
    """Run the sampler from grid[0] to grid[-1] on a (batch, dim) state.

    ``noise`` is (batch, K, dim) standard normals, needed only for stochastic
    methods. ``project`` is applied after the final denoising jump.
    """
    times = config.grid.as_array()
    K = times.size - 1
    u = np.array(u, dtype=np.float64, copy=True)
    if config.stochastic and noise is None:
        raise ValueError("stochastic sampling needs a noise array")
    for k in range(K):
        t, t_next = times[k], times[k + 1]
        dt = t - t_next
        rate = schedule.sigma_dot(t) * schedule.sigma(t)
        s = score_fn(u, t)
        if config.method == "heun":
            u_pred = u + rate * s * dt
            if k < K - 1:
                rate_next = schedule.sigma_dot(t_next) * schedule.sigma(t_next)
                s_next = score_fn(u_pred, t_next)
                u = u + 0.5 * dt * (rate * s + rate_next * s_next)
            else:
                u = u_pred
        elif config.stochastic:
            eta = config.eta
            u = u + (1 + eta**2) * rate * s * dt + eta * math.sqrt(2 * rate * dt) * noise[:, k]
        else:
            u = u + rate * s * dt
        if not np.all(np.isfinite(u)):
            raise SamplerError(f"non-finite sampler state at step {k} (t={t:.6g})")
    if config.final_denoise:
        t0 = times[-1]
        u = u + schedule.sigma(t0) ** 2 * score_fn(u, t0)
        if project is not None:
            u = project(u)
        if not np.all(np.isfinite(u)):
            raise SamplerError("non-finite state after the final denoising step")
    return u


def _draw(seeds, dim, schedule, config):
    """Prior states and step noise for one chunk, each row from its own stream."""
    K = config.grid.steps
    t_start = config.grid.times[0]
    u = np.empty((len(seeds), dim))
    noise = np.empty((len(seeds), K, dim)) if config.stochastic else None
    for r, seed in enumerate(seeds):
        gen = _rng.generator(seed)
        u[r] = sample_prior(dim, schedule, t_start, gen)
        if noise is not None:
            noise[r] = gen.standard_normal((K, dim))
    return u, noise


def sample(score_fn, dim: int, schedule: NoiseSchedule, config: SamplerConfig, project=None) -> np.ndarray:
    """One sample whose randomness is the stream of ``config.seed``."""
    u, noise = _draw([config.seed], dim, schedule, config)
    return integrate(score_fn, u, schedule, config, noise, project)[0]


def member_seeds(seed: int, count: int) -> list[int]:
    return [_rng.derive_seed(seed, i) for i in range(count)]


def sample_batch(score_fn, dim: int, schedule: NoiseSchedule, config: SamplerConfig, count: int,
                 workers: int = 1, project=None, chunk_size: int = CHUNK_SIZE) -> np.ndarray:
    """``count`` samples; member i uses seed derive_seed(config.seed, i).

    Chunks of ``chunk_size`` members are integrated together; chunking is
    independent of ``workers`` so outputs are bit-identical for any pool size.
    Score functions/projections exposing ``for_rows(slice)`` receive the row
    range of each chunk (for per-member observations).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    seeds = member_seeds(config.seed, count)
    out = np.empty((count, dim))
    chunks = [slice(a, min(a + chunk_size, count)) for a in range(0, count, chunk_size)]

    def run(rows):
        u, noise = _draw(seeds[rows], dim, schedule, config)
        out[rows] = integrate(_for_rows(score_fn, rows), u, schedule, config, noise, _for_rows(project, rows))

    if workers <= 1 or len(chunks) == 1:
        for rows in chunks:
            run(rows)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, chunks))
    return out


def num_chunks(count: int, chunk_size: int = CHUNK_SIZE) -> int:
    return -(-count // chunk_size)
