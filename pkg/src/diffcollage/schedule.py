"""Variance-exploding noise schedules and sampler time grids."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

KINDS = ("linear-ve", "geometric-ve")


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    """sigma(t) for a variance-exploding forward process.

    ``linear-ve`` uses sigma(t) = t on [sigma_min, sigma_max], so time and
    noise level coincide. ``geometric-ve`` interpolates geometrically on
    t in [0, 1].
    """

    kind: str = "linear-ve"
    sigma_min: float = 0.002
    sigma_max: float = 80.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if not (math.isfinite(self.sigma_min) and math.isfinite(self.sigma_max)):
            raise ValueError("sigma_min and sigma_max must be finite")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError(
                f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}"
            )

    @property
    def domain(self) -> tuple[float, float]:
        if self.kind == "linear-ve":
            return (self.sigma_min, self.sigma_max)
        return (0.0, 1.0)

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def _check(self, t):
        lo, hi = self.domain
        arr = np.asarray(t, dtype=np.float64)
        # small slack so grid endpoints that went through the inverse map stay legal
        tol = 1e-12 * max(1.0, abs(hi))
        if np.any(arr < lo - tol) or np.any(arr > hi + tol) or np.any(~np.isfinite(arr)):
            raise ValueError(f"t={t} outside schedule domain [{lo}, {hi}]")
        return arr

    def sigma(self, t):
        """Noise standard deviation at time ``t`` (scalar or array)."""
        arr = self._check(t)
        if self.kind == "linear-ve":
            out = arr.copy()
        else:
            out = self.sigma_min * np.exp(arr * self.log_ratio)
        return float(out) if out.ndim == 0 else out

    def sigma_dot(self, t):
        """d sigma / d t."""
        arr = self._check(t)
        if self.kind == "linear-ve":
            out = np.ones_like(arr)
        else:
            out = self.sigma_min * np.exp(arr * self.log_ratio) * self.log_ratio
        return float(out) if out.ndim == 0 else out

    def time_of_sigma(self, sigma):
        """Inverse of ``sigma``."""
        s = np.asarray(sigma, dtype=np.float64)
        if np.any(s <= 0):
            raise ValueError("sigma must be positive")
        if self.kind == "linear-ve":
            out = s.copy()
        else:
            out = np.log(s / self.sigma_min) / self.log_ratio
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class TimeGrid:
    """Strictly decreasing sampler times t_K > ... > t_0."""

    times: tuple[float, ...]

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("a time grid needs at least two points")
        if not np.all(np.diff(t) < 0):
            raise ValueError("time grid must be strictly decreasing")

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    def as_array(self) -> np.ndarray:
        return np.asarray(self.times, dtype=np.float64)


def karras_sigmas(sigma_min: float, sigma_max: float, steps: int, rho: float = 7.0) -> np.ndarray:
    """sigma_k = (smax^(1/rho) + k/K (smin^(1/rho) - smax^(1/rho)))^rho, k = 0..K."""
    if int(steps) != steps or steps < 1:
        raise ValueError(f"steps must be a positive integer, got {steps}")
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    ramp = np.arange(steps + 1, dtype=np.float64) / steps
    hi = sigma_max ** (1.0 / rho)
    lo = sigma_min ** (1.0 / rho)
    sig = (hi + ramp * (lo - hi)) ** rho
    # pin the endpoints against pow round-off
    sig[0], sig[-1] = sigma_max, sigma_min
    return sig


def karras_grid(schedule: NoiseSchedule, steps: int = 80, rho: float = 7.0) -> TimeGrid:
    sig = karras_sigmas(schedule.sigma_min, schedule.sigma_max, steps, rho)
    times = np.atleast_1d(schedule.time_of_sigma(sig))
    lo, hi = schedule.domain
    times[0], times[-1] = hi, lo
    return TimeGrid(tuple(float(x) for x in times))
