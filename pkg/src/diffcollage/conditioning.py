"""Training-free conditioning: observation operators, replacement and
reconstruction guidance, the autoregressive outpainting baseline, and slerp.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import rng as _rng
from .errors import CapabilityError
from .sampler import CountedScore, SamplerConfig, num_chunks, sample_batch
from .schedule import NoiseSchedule


class LinearOperator:
    """Linear observation y = H u acting on the last axis."""

    kind = "abstract"
    in_dim: int
    out_dim: int

    def _check(self, x, n, what):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != n:
            raise ValueError(f"{what} has length {x.shape[-1]}, expected {n}")
        return x

    def apply(self, u):
        raise NotImplementedError

    def apply_transpose(self, y):
        raise NotImplementedError

    def apply_pinv(self, y):
        raise NotImplementedError

    def project(self, u0, y):
        """H^+ y + (I - H^+ H) u0."""
        return u0 + self.apply_pinv(y) - self.apply_pinv(self.apply(u0))

    def matrix(self) -> np.ndarray:
        return self.apply(np.eye(self.in_dim)).T


class MaskOperator(LinearOperator):
    kind = "mask"

    def __init__(self, keep, in_dim: int):
        keep = [int(k) for k in keep]
        if not keep:
            raise ValueError("mask must keep at least one coordinate")
        if keep != sorted(set(keep)):
            raise ValueError("mask coordinates must be sorted and unique")
        if keep[0] < 0 or keep[-1] >= in_dim:
            raise ValueError(f"mask coordinates out of range for dimension {in_dim}")
        self.keep = np.asarray(keep, dtype=np.int64)
        self.in_dim = int(in_dim)
        self.out_dim = len(keep)

    def apply(self, u):
        return self._check(u, self.in_dim, "input")[..., self.keep]

    def apply_transpose(self, y):
        y = self._check(y, self.out_dim, "observation")
        out = np.zeros(y.shape[:-1] + (self.in_dim,))
        out[..., self.keep] = y
        return out

    apply_pinv = apply_transpose

    def project(self, u0, y):
        # exact copy, so observed coordinates equal y bit for bit
        out = np.array(self._check(u0, self.in_dim, "input"), copy=True)
        out[..., self.keep] = self._check(y, self.out_dim, "observation")
        return out


class BoxDownOperator(LinearOperator):
    """Non-overlapping block means over a 1D signal."""

    kind = "boxdown"

    def __init__(self, block: int, in_dim: int):
        if block < 1 or in_dim % block:
            raise ValueError(f"in_dim {in_dim} is not divisible by block {block}")
        self.block = int(block)
        self.in_dim = int(in_dim)
        self.out_dim = in_dim // block

    def apply(self, u):
        u = self._check(u, self.in_dim, "input")
        return u.reshape(u.shape[:-1] + (self.out_dim, self.block)).mean(axis=-1)

    def apply_transpose(self, y):
        y = self._check(y, self.out_dim, "observation")
        return np.repeat(y, self.block, axis=-1) / self.block

    def apply_pinv(self, y):
        return np.repeat(self._check(y, self.out_dim, "observation"), self.block, axis=-1)


def make_operator(spec: dict, in_dim: int) -> LinearOperator:
    kind = spec.get("kind")
    if kind == "mask":
        return MaskOperator(spec["keep"], in_dim)
    if kind == "boxdown":
        return BoxDownOperator(spec["block"], in_dim)
    raise ValueError(f"unknown operator kind {kind!r}")


@dataclasses.dataclass(frozen=True)
class GuidanceConfig:
    method: str = "replacement"
    lam: float = 1.0
    lambda_schedule: str = "scaled"
    gradient_mode: str = "auto"

    def __post_init__(self):
        if self.method not in ("replacement", "reconstruction"):
            raise ValueError(f"unknown guidance method {self.method!r}")
        if self.lambda_schedule not in ("constant", "scaled"):
            raise ValueError(f"unknown lambda schedule {self.lambda_schedule!r}")
        if self.gradient_mode not in ("auto", "exact-vjp", "identity-jacobian"):
            raise ValueError(f"unknown gradient mode {self.gradient_mode!r}")
        if self.method == "reconstruction" and not self.lam > 0:
            raise ValueError("lambda must be positive for reconstruction guidance")

    def lambda_at(self, sigma: float) -> float:
        return self.lam / sigma**2 if self.lambda_schedule == "scaled" else self.lam

    def resolved_mode(self, score_fn) -> str:
        if self.gradient_mode != "auto":
            return self.gradient_mode
        return "exact-vjp" if getattr(score_fn, "supports_vjp", False) else "identity-jacobian"


def replacement_step(score_fn, u, t, op: LinearOperator, y, schedule: NoiseSchedule) -> np.ndarray:
    sigma2 = schedule.sigma(t) ** 2
    u = np.asarray(u, dtype=np.float64)
    u0_hat = u + sigma2 * score_fn(u, t)
    u0_tilde = op.project(u0_hat, y)
    return (u0_tilde - u) / sigma2


def reconstruction_gradient(score_fn, u, t, op: LinearOperator, y, schedule: NoiseSchedule,
                            mode: str = "exact-vjp", s=None) -> np.ndarray:
    """Gradient of ||H u0_hat(u) - y||^2 with respect to u."""
    sigma2 = schedule.sigma(t) ** 2
    u = np.asarray(u, dtype=np.float64)
    if s is None:
        s = score_fn(u, t)
    g = 2.0 * op.apply_transpose(op.apply(u + sigma2 * s) - y)
    if mode == "identity-jacobian":
        return g
    if not getattr(score_fn, "supports_vjp", False):
        raise CapabilityError("exact-vjp gradient needs a score model with VJP support")
    return g + sigma2 * score_fn.vjp(u, t, g)


def reconstruction_score(score_fn, u, t, op: LinearOperator, y, cfg: GuidanceConfig,
                         schedule: NoiseSchedule) -> np.ndarray:
    """s - lambda_t * grad ||H u0_hat - y||^2 (descent direction)."""
    u = np.asarray(u, dtype=np.float64)
    s = score_fn(u, t)
    grad = reconstruction_gradient(score_fn, u, t, op, y, schedule, cfg.resolved_mode(score_fn), s)
    return s - cfg.lambda_at(schedule.sigma(t)) * grad


class GuidedScore:
    """Score function with guidance baked in, usable by any sampler.

    ``y`` is one observation or one row per batch member; ``for_rows`` slices
    it for chunked batch sampling.
    """

    def __init__(self, score_fn, op: LinearOperator, y, cfg: GuidanceConfig, schedule: NoiseSchedule):
        self.score_fn = score_fn
        self.op = op
        self.y = np.asarray(y, dtype=np.float64)
        self.cfg = cfg
        self.schedule = schedule
        if cfg.method == "reconstruction" and cfg.resolved_mode(score_fn) == "exact-vjp" \
                and not getattr(score_fn, "supports_vjp", False):
            raise CapabilityError("exact-vjp gradient needs a score model with VJP support")

    def for_rows(self, rows: slice) -> "GuidedScore":
        if self.y.ndim == 1:
            return self
        return GuidedScore(self.score_fn, self.op, self.y[rows], self.cfg, self.schedule)

    def __call__(self, u, t):
        if self.cfg.method == "replacement":
            return replacement_step(self.score_fn, u, t, self.op, self.y, self.schedule)
        return reconstruction_score(self.score_fn, u, t, self.op, self.y, self.cfg, self.schedule)

    def projection(self):
        """Final data-consistency projection (replacement only)."""
        if self.cfg.method != "replacement":
            return None
        return Projection(self.op, self.y)


class Projection:
    def __init__(self, op: LinearOperator, y):
        self.op = op
        self.y = np.asarray(y, dtype=np.float64)

    def for_rows(self, rows: slice) -> "Projection":
        return self if self.y.ndim == 1 else Projection(self.op, self.y[rows])

    def __call__(self, u):
        return self.op.project(u, self.y)


def guided_sample_batch(score_fn, dim, op, y, cfg: GuidanceConfig, schedule, config: SamplerConfig,
                        count: int, workers: int = 1) -> np.ndarray:
    guided = GuidedScore(score_fn, op, y, cfg, schedule)
    return sample_batch(guided, dim, schedule, config, count, workers, project=guided.projection())


@dataclasses.dataclass
class OutpaintResult:
    samples: np.ndarray
    blocks: list[np.ndarray]
    block_calls: list[int]

    @property
    def sequential_calls(self) -> int:
        """Score calls along one sample path, summed over blocks."""
        return int(sum(self.block_calls))


def block_seed(seed: int, b: int) -> int:
    return seed if b == 0 else _rng.derive_seed(seed, 0xB10C, b)


def autoregressive_outpaint(base_score, block_len: int, num_blocks: int, overlap: int, cfg: GuidanceConfig,
                            schedule: NoiseSchedule, config: SamplerConfig, count: int,
                            workers: int = 1) -> OutpaintResult:
    """Grow content block by block, conditioning each block's leading
    ``overlap`` coordinates on the trailing ones of its predecessor."""
    if num_blocks < 1:
        raise ValueError("num_blocks must be >= 1")
    if not 0 < overlap < block_len:
        raise ValueError("overlap must lie strictly between 0 and the block length")
    counted = CountedScore(base_score)
    op = MaskOperator(range(overlap), block_len)
    blocks, calls, pieces = [], [], []
    prev = None
    for b in range(num_blocks):
        before = counted.calls
        cfg_b = dataclasses.replace(config, seed=block_seed(config.seed, b))
        if prev is None:
            block = sample_batch(counted, block_len, schedule, cfg_b, count, workers)
            pieces.append(block)
        else:
            block = guided_sample_batch(counted, block_len, op, prev[:, -overlap:], cfg, schedule, cfg_b,
                                        count, workers)
            pieces.append(block[:, overlap:])
        calls.append((counted.calls - before) // num_chunks(count))
        blocks.append(block)
        prev = block
    return OutpaintResult(np.concatenate(pieces, axis=1), blocks, calls)


def naive_concatenation(base_score, block_len: int, num_blocks: int, schedule: NoiseSchedule,
                        config: SamplerConfig, count: int, workers: int = 1) -> np.ndarray:
    """Independent short samples placed side by side."""
    parts = [
        sample_batch(base_score, block_len, schedule, dataclasses.replace(config, seed=block_seed(config.seed, b)),
                     count, workers)
        for b in range(num_blocks)
    ]
    return np.concatenate(parts, axis=1)


def slerp(a, b, tau: float) -> np.ndarray:
    """Spherical interpolation of directions with linearly interpolated norms."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("slerp endpoints must be non-zero")
    ua, ub = a / na, b / nb
    omega = math.acos(float(np.clip(ua @ ub, -1.0, 1.0)))
    norm = (1 - tau) * na + tau * nb
    if omega < 1e-7:
        return (1 - tau) * a + tau * b
    if math.pi - omega < 1e-7:
        raise ValueError("slerp endpoints are antipodal; the great circle is undefined")
    direction = (math.sin((1 - tau) * omega) * ua + math.sin(tau * omega) * ub) / math.sin(omega)
    return norm * direction / np.linalg.norm(direction)
