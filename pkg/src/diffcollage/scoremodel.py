"""Score models for node marginals: analytic oracles and a trainable MLP.

All models take node-local vectors of shape (d,) or (batch, d) and a
diffusion time t, and return the score of the sigma(t)-noised marginal.
"""

from __future__ import annotations

import dataclasses
import io
import math
import struct
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy import linalg

from . import rng as _rng
from .errors import CapabilityError, FormatError, NumericalError, TrainingError
from .graph import FACTOR, FactorGraph, NodeRef, bethe_coefficients
from .schedule import NoiseSchedule


def _as_batch(u) -> tuple[np.ndarray, bool]:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        return u[None, :], True
    if u.ndim != 2:
        raise ValueError(f"expected a vector or a (batch, dim) array, got shape {u.shape}")
    return u, False


class ScoreModel:
    """Base class: ``model(u, t, condition)`` evaluates the score at time t."""

    schedule: NoiseSchedule

    def __call__(self, u, t, condition=None) -> np.ndarray:
        return self.score(u, self.schedule.sigma(t), condition)

    def score(self, u, sigma: float, condition=None) -> np.ndarray:
        raise NotImplementedError

    @property
    def supports_vjp(self) -> bool:
        return False

    def vjp(self, u, t, v, condition=None) -> np.ndarray:
        """(d score / d u)^T v."""
        raise CapabilityError(f"{type(self).__name__} does not provide input VJPs")


class GaussianScoreModel(ScoreModel):
    """Exact score of N(mean, cov) noised to N(mean, cov + sigma^2 I)."""

    def __init__(self, mean, covariance, schedule: NoiseSchedule):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        self.covariance = np.atleast_2d(np.asarray(covariance, dtype=np.float64))
        d = self.mean.size
        if self.covariance.shape != (d, d):
            raise ValueError(f"covariance shape {self.covariance.shape} does not match mean dim {d}")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-12, rtol=0):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(self.covariance).min() <= 0:
            raise ValueError("covariance must be positive definite")
        self.schedule = schedule
        self.dim = d

    def _factor(self, sigma):
        noised = self.covariance + sigma**2 * np.eye(self.dim)
        try:
            return linalg.cho_factor(noised, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"Cholesky failed for noised covariance at sigma={sigma}") from exc

    def precision(self, sigma: float) -> np.ndarray:
        return linalg.cho_solve(self._factor(sigma), np.eye(self.dim))

    def score(self, u, sigma, condition=None):
        ub, single = _as_batch(u)
        if ub.shape[1] != self.dim:
            raise ValueError(f"input dim {ub.shape[1]} != model dim {self.dim}")
        out = -linalg.cho_solve(self._factor(sigma), (ub - self.mean).T).T
        return out[0] if single else out

    def log_density(self, u, sigma) -> np.ndarray:
        ub, single = _as_batch(u)
        c = self._factor(sigma)
        r = ub - self.mean
        quad = np.sum(r * linalg.cho_solve(c, r.T).T, axis=1)
        logdet = 2 * np.sum(np.log(np.diag(c[0])))
        out = -0.5 * (quad + logdet + self.dim * math.log(2 * math.pi))
        return out[0] if single else out

    @property
    def supports_vjp(self):
        return True

    def vjp(self, u, t, v, condition=None):
        vb, single = _as_batch(v)
        out = -linalg.cho_solve(self._factor(self.schedule.sigma(t)), vb.T).T
        return out[0] if single else out


class GmmScoreModel(ScoreModel):
    """Exact score of a Gaussian mixture noised component-wise."""

    def __init__(self, weights, means, covariances, schedule: NoiseSchedule):
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        self.weights = w
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        if self.means.shape[0] != w.size:
            self.means = self.means.reshape(w.size, -1)
        d = self.means.shape[1]
        covs = np.asarray(covariances, dtype=np.float64).reshape(w.size, d, d)
        self.covariances = covs
        self.schedule = schedule
        self.dim = d

    def _components(self, ub, sigma):
        """Per-component log weights+densities and component scores."""
        logp, scores = [], []
        for w, mu, cov in zip(self.weights, self.means, self.covariances):
            c = linalg.cho_factor(cov + sigma**2 * np.eye(self.dim), lower=True)
            r = ub - mu
            sol = linalg.cho_solve(c, r.T).T
            logdet = 2 * np.sum(np.log(np.diag(c[0])))
            logp.append(math.log(w) - 0.5 * (np.sum(r * sol, axis=1) + logdet + self.dim * math.log(2 * math.pi)))
            scores.append(-sol)
        return np.stack(logp, axis=1), np.stack(scores, axis=1)

    def _resp(self, logp):
        shift = logp.max(axis=1, keepdims=True)
        e = np.exp(logp - shift)
        return e / e.sum(axis=1, keepdims=True)

    def score(self, u, sigma, condition=None):
        ub, single = _as_batch(u)
        logp, comp = self._components(ub, sigma)
        out = np.einsum("bc,bcd->bd", self._resp(logp), comp)
        return out[0] if single else out

    def log_density(self, u, sigma):
        ub, single = _as_batch(u)
        logp, _ = self._components(ub, sigma)
        shift = logp.max(axis=1)
        out = shift + np.log(np.exp(logp - shift[:, None]).sum(axis=1))
        return out[0] if single else out

    @property
    def supports_vjp(self):
        return True

    def vjp(self, u, t, v, condition=None):
        # Hessian of the log-density: sum_c r_c (-A_c^{-1} + s_c s_c^T) - s s^T (symmetric)
        sigma = self.schedule.sigma(t)
        ub, single = _as_batch(u)
        vb, _ = _as_batch(v)
        logp, comp = self._components(ub, sigma)
        resp = self._resp(logp)
        s = np.einsum("bc,bcd->bd", resp, comp)
        out = np.zeros_like(vb)
        for k, cov in enumerate(self.covariances):
            c = linalg.cho_factor(cov + sigma**2 * np.eye(self.dim), lower=True)
            term = -linalg.cho_solve(c, vb.T).T + comp[:, k] * np.sum(comp[:, k] * vb, axis=1, keepdims=True)
            out += resp[:, k : k + 1] * term
        out -= s * np.sum(s * vb, axis=1, keepdims=True)
        return out[0] if single else out


# --------------------------------------------------------------------------
# MLP


class MlpScoreModel(ScoreModel):
    """tanh MLP predicting the injected noise; score = -eps_hat / sigma.

    Input features are ``[u, log sigma, condition]``. With ``half_width`` the
    network also accepts inputs of length data_dim // 2: they are zero-padded
    to data_dim and flagged with an extra indicator feature, so one parameter
    set serves factor-width and variable-width nodes.
    """

    def __init__(self, data_dim, hidden, schedule, cond_dim=0, half_width=False, params=None, seed=0):
        self.data_dim = int(data_dim)
        self.cond_dim = int(cond_dim)
        self.half_width = bool(half_width)
        if self.half_width and self.data_dim % 2:
            raise ValueError("half-width dispatch needs an even data_dim")
        self.schedule = schedule
        self.in_dim = self.data_dim + int(self.half_width) + 1 + self.cond_dim
        self.layer_widths = (self.in_dim, *(int(h) for h in hidden), self.data_dim)
        if params is None:
            params = init_params(self.layer_widths, _rng.generator(seed))
        self.params = [np.asarray(p, dtype=np.float64) for p in params]
        self._check_shapes()
        self.training_log: dict = {}

    def _check_shapes(self):
        if len(self.params) != 2 * (len(self.layer_widths) - 1):
            raise ValueError("parameter list does not match layer widths")
        for k, (a, b) in enumerate(zip(self.layer_widths, self.layer_widths[1:])):
            if self.params[2 * k].shape != (a, b) or self.params[2 * k + 1].shape != (b,):
                raise ValueError(f"layer {k} parameters have wrong shape")

    @property
    def hidden(self) -> tuple[int, ...]:
        return self.layer_widths[1:-1]

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.data_dim, self.data_dim // 2) if self.half_width else (self.data_dim,)

    def features(self, u, sigma, condition=None) -> np.ndarray:
        ub, _ = _as_batch(u)
        n, w = ub.shape
        if w == self.data_dim:
            cols = [ub]
            if self.half_width:
                cols.append(np.zeros((n, 1)))
        elif self.half_width and w == self.data_dim // 2:
            cols = [ub, np.zeros((n, self.data_dim - w)), np.ones((n, 1))]
        else:
            raise ValueError(f"input width {w} not supported (model widths {self.widths})")
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64).reshape(-1, 1), (n, 1))
        cols.append(np.log(sig))
        if self.cond_dim:
            if condition is None:
                cond = np.zeros((n, self.cond_dim))
            else:
                cond = np.broadcast_to(np.asarray(condition, dtype=np.float64), (n, self.cond_dim))
            cols.append(cond)
        elif condition is not None and np.size(condition):
            raise ValueError("model was built without a condition input")
        return np.concatenate(cols, axis=1)

    def forward(self, X, params=None):
        """Returns (output, hidden activations list)."""
        params = self.params if params is None else params
        acts = [X]
        h = X
        nl = len(params) // 2
        for k in range(nl):
            z = h @ params[2 * k] + params[2 * k + 1]
            h = np.tanh(z) if k < nl - 1 else z
            if not np.all(np.isfinite(h)):
                raise NumericalError(f"non-finite activation in layer {k}")
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out, params=None, want_input=False):
        """Backprop grad_out (d loss / d output). Returns (param grads, input grad)."""
        params = self.params if params is None else params
        nl = len(params) // 2
        grads = [None] * len(params)
        g = grad_out
        for k in reversed(range(nl)):
            if k < nl - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            grads[2 * k] = acts[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            if k > 0 or want_input:
                g = g @ params[2 * k].T
        return grads, (g if want_input else None)

    def eps_hat(self, u, sigma, condition=None):
        out, _ = self.forward(self.features(u, sigma, condition))
        return out

    def score(self, u, sigma, condition=None):
        ub, single = _as_batch(u)
        w = ub.shape[1]
        out = -self.eps_hat(ub, sigma, condition)[:, :w] / np.asarray(sigma, dtype=np.float64).reshape(-1, 1)
        return out[0] if single else out

    @property
    def supports_vjp(self):
        return True

    def vjp(self, u, t, v, condition=None):
        sigma = self.schedule.sigma(t)
        ub, single = _as_batch(u)
        vb, _ = _as_batch(v)
        w = ub.shape[1]
        _, acts = self.forward(self.features(ub, sigma, condition))
        gout = np.zeros((ub.shape[0], self.data_dim))
        gout[:, :w] = -vb / sigma
        _, gin = self.backward(acts, gout, want_input=True)
        out = gin[:, :w]
        return out[0] if single else out

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def copy(self) -> "MlpScoreModel":
        return MlpScoreModel(
            self.data_dim, self.hidden, self.schedule, self.cond_dim, self.half_width,
            params=[p.copy() for p in self.params],
        )


def init_params(widths, gen: np.random.Generator) -> list[np.ndarray]:
    params = []
    for a, b in zip(widths, widths[1:]):
        lim = math.sqrt(6.0 / (a + b))
        params.append(gen.uniform(-lim, lim, size=(a, b)))
        params.append(np.zeros(b))
    return params


# --------------------------------------------------------------------------
# denoising score matching


@dataclasses.dataclass(frozen=True)
class DsmConfig:
    iterations: int = 2000
    batch_size: int = 128
    learning_rate: float = 1e-2
    momentum: float = 0.9
    rng_seed: int = 0
    # noise levels are drawn log-uniformly from [sigma_min, sigma_max];
    # None falls back to the model schedule's range
    sigma_min: float | None = None
    sigma_max: float | None = None
    lr_decay: str = "cosine"  # cosine | none
    clip_norm: float | None = 10.0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("iterations, batch_size and learning_rate must be positive")
        if self.lr_decay not in ("cosine", "none"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")


@dataclasses.dataclass
class Dataset:
    samples: np.ndarray
    conditions: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.shape[0] == 0:
            raise ValueError("dataset is empty")
        if self.conditions is not None:
            self.conditions = np.atleast_2d(np.asarray(self.conditions, dtype=np.float64))
            if self.conditions.shape[0] != self.samples.shape[0]:
                raise ValueError("conditions must have one row per sample")

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def __len__(self):
        return self.samples.shape[0]

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        from .files import read_matrix_csv

        return cls(read_matrix_csv(path))


def sample_sigmas(gen: np.random.Generator, n: int, sigma_min: float, sigma_max: float) -> np.ndarray:
    lo, hi = math.log(sigma_min), math.log(sigma_max)
    return np.exp(gen.uniform(lo, hi, size=n))


def dsm_loss_given(model: MlpScoreModel, u0, sigmas, noise, conditions=None, params=None, mask=None):
    """Loss and parameter gradients for fixed (sigma, eps) draws.

    With weight sigma^2 the per-sample loss is ||eps - eps_hat(u0 + sigma eps)||^2.
    ``mask`` (batch, data_dim) selects which outputs count (half-width crops).
    """
    params = model.params if params is None else params
    u0 = np.atleast_2d(u0)
    sig = np.asarray(sigmas, dtype=np.float64).reshape(-1, 1)
    ut = u0 + sig * noise
    X = model.features(ut, sig, conditions)
    out, acts = model.forward(X, params)
    target = np.zeros_like(out)
    target[:, : noise.shape[1]] = noise
    diff = out - target
    if mask is None and noise.shape[1] < model.data_dim:
        mask = np.zeros_like(out)
        mask[:, : noise.shape[1]] = 1.0
    if mask is not None:
        diff = diff * mask
    n = u0.shape[0]
    loss = float(np.sum(diff**2) / n)
    grads, _ = model.backward(acts, 2.0 * diff / n, params)
    return loss, grads


def dsm_loss(model: MlpScoreModel, batch, rng: np.random.Generator, conditions=None,
             sigma_min=None, sigma_max=None):
    """Draw (sigma, eps) per batch element and return (loss, gradients)."""
    u0 = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if u0.shape[0] == 0:
        raise ValueError("batch is empty")
    lo = model.schedule.sigma_min if sigma_min is None else sigma_min
    hi = model.schedule.sigma_max if sigma_max is None else sigma_max
    sig = sample_sigmas(rng, u0.shape[0], lo, hi)
    noise = rng.standard_normal(u0.shape)
    return dsm_loss_given(model, u0, sig, noise, conditions)


def _lr_at(config: DsmConfig, it: int) -> float:
    if config.lr_decay == "cosine":
        return config.learning_rate * 0.5 * (1 + math.cos(math.pi * it / config.iterations))
    return config.learning_rate


def _sgd_loop(model: MlpScoreModel, config: DsmConfig, gen, draw_batch) -> dict:
    """SGD with momentum. ``draw_batch(gen)`` returns (u0, conditions, cropped)."""
    lo = config.sigma_min or model.schedule.sigma_min
    hi = config.sigma_max or model.schedule.sigma_max
    velocity = [np.zeros_like(p) for p in model.params]
    losses = np.empty(config.iterations)
    cropped = np.zeros(config.iterations, dtype=bool)
    for it in range(config.iterations):
        u0, cond, crop = draw_batch(gen)
        cropped[it] = crop
        sig = sample_sigmas(gen, u0.shape[0], lo, hi)
        noise = gen.standard_normal(u0.shape)
        try:
            loss, grads = dsm_loss_given(model, u0, sig, noise, cond)
        except NumericalError as exc:
            raise TrainingError(f"training diverged at iteration {it}: {exc}") from exc
        if not math.isfinite(loss):
            raise TrainingError(f"training diverged at iteration {it}: loss={loss}")
        losses[it] = loss
        if config.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > config.clip_norm:
                grads = [g * (config.clip_norm / norm) for g in grads]
        lr = _lr_at(config, it)
        for p, v, g in zip(model.params, velocity, grads):
            v *= config.momentum
            v -= lr * g
            p += v
    return {"loss": losses, "cropped": cropped}


def train_node(dataset: Dataset, hidden, config: DsmConfig, schedule: NoiseSchedule, seed=None) -> MlpScoreModel:
    """Fit one node's marginal score by denoising score matching."""
    seed = config.rng_seed if seed is None else seed
    gen = _rng.generator(seed, 1)
    cond_dim = 0 if dataset.conditions is None else dataset.conditions.shape[1]
    model = MlpScoreModel(dataset.dim, hidden, schedule, cond_dim=cond_dim, seed=_rng.derive_seed(seed, 0))
    n = len(dataset)

    def draw(g):
        idx = g.integers(0, n, size=config.batch_size)
        cond = None if dataset.conditions is None else dataset.conditions[idx]
        return dataset.samples[idx], cond, False

    model.training_log = _sgd_loop(model, config, gen, draw)
    return model


def node_seed(seed: int, node: NodeRef) -> int:
    return _rng.derive_seed(seed, 0 if node.kind == FACTOR else 1, node.index)


def train_collage(datasets: Mapping[NodeRef, Dataset], graph: FactorGraph, hidden, config: DsmConfig,
                  schedule: NoiseSchedule, workers: int = 1) -> dict[NodeRef, MlpScoreModel]:
    """Train every node with a non-zero Bethe coefficient independently."""
    coeffs = bethe_coefficients(graph)
    needed = [n for n in graph.nodes() if coeffs.coeff(n) != 0]
    for node in needed:
        if node not in datasets:
            raise ValueError(f"missing dataset for {node}")
        if datasets[node].dim != graph.node_dim(node):
            raise ValueError(f"dataset for {node} has dim {datasets[node].dim}, node has {graph.node_dim(node)}")

    def job(node):
        return train_node(datasets[node], hidden, config, schedule, seed=node_seed(config.rng_seed, node))

    if workers <= 1:
        models = [job(n) for n in needed]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            models = list(pool.map(job, needed))
    return dict(zip(needed, models))


def train_shift_invariant(dataset: Dataset, hidden, config: DsmConfig, schedule: NoiseSchedule,
                          crop_prob: float = 0.5) -> MlpScoreModel:
    """One shared model for factor-width and half-width (variable) windows.

    Each step uses, with probability ``crop_prob``, a random contiguous
    half-width crop of every drawn sample instead of the full window.
    """
    F = dataset.dim
    if F % 2:
        raise ValueError(f"factor width must be even, got {F}")
    half = F // 2
    seed = config.rng_seed
    gen = _rng.generator(seed, 1)
    model = MlpScoreModel(F, hidden, schedule, half_width=True, seed=_rng.derive_seed(seed, 0))
    n = len(dataset)
    rows = np.arange(config.batch_size)[:, None]

    def draw(g):
        idx = g.integers(0, n, size=config.batch_size)
        u0 = dataset.samples[idx]
        if g.random() < crop_prob:
            off = g.integers(0, F - half + 1, size=config.batch_size)
            return u0[rows, off[:, None] + np.arange(half)], None, True
        return u0, None, False

    model.training_log = _sgd_loop(model, config, gen, draw)
    return model


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"DCSM"
VERSION = 1
_KIND_CODES = {"linear-ve": 0, "geometric-ve": 1}


def save_checkpoint(model: MlpScoreModel) -> bytes:
    """Little-endian: magic, version, arch header, schedule, f64 parameters."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<IIB", model.data_dim, model.cond_dim, int(model.half_width)))
    widths = model.layer_widths
    buf.write(struct.pack("<I", len(widths)))
    buf.write(struct.pack(f"<{len(widths)}I", *widths))
    sch = model.schedule
    buf.write(struct.pack("<Bdd", _KIND_CODES[sch.kind], sch.sigma_min, sch.sigma_max))
    for p in model.params:
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return buf.getvalue()


def load_checkpoint(blob: bytes) -> MlpScoreModel:
    view = memoryview(blob)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise FormatError(f"checkpoint truncated at byte {pos}")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    if bytes(view[:4]) != MAGIC:
        raise FormatError("not a score-model checkpoint (bad magic)")
    pos = 4
    (version,) = take("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    data_dim, cond_dim, half = take("<IIB")
    (nw,) = take("<I")
    widths = take(f"<{nw}I")
    kind_code, smin, smax = take("<Bdd")
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if kind_code not in kinds:
        raise FormatError(f"unknown schedule code {kind_code}")
    params = []
    for a, b in zip(widths, widths[1:]):
        for shape in ((a, b), (b,)):
            count = math.prod(shape)
            if pos + 8 * count > len(view):
                raise FormatError(f"checkpoint truncated at byte {pos}")
            params.append(np.frombuffer(view, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64))
            pos += 8 * count
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after checkpoint payload")
    schedule = NoiseSchedule(kinds[kind_code], smin, smax)
    model = MlpScoreModel(data_dim, widths[1:-1], schedule, cond_dim=cond_dim, half_width=bool(half), params=params)
    if model.layer_widths != tuple(widths):
        raise FormatError("checkpoint arch header is inconsistent")
    return model
