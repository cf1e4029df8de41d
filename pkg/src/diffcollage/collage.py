"""Joint score = sum of factor scores + sum of (1 - d_i) variable scores.

Node evaluations are independent and may run on a thread pool; their
outputs land in private buffers and are reduced into the joint vector in a
fixed order (factors ascending, then variables ascending), so the result is
bit-identical for any worker count.
"""

from __future__ import annotations

import dataclasses
import threading
from collections.abc import Mapping
from concurrent.futures import Executor, ThreadPoolExecutor

import numpy as np

from .errors import CapabilityError, NumericalError
from .graph import FactorGraph, GaussianMarginal, NodeRef, bethe_coefficients
from .schedule import NoiseSchedule
from .scoremodel import GaussianScoreModel, ScoreModel


def gather(u_joint, coords) -> np.ndarray:
    """Node-local view(s): ``out[..., k] = u_joint[..., coords[k]]``."""
    u = np.asarray(u_joint)
    idx = np.asarray(coords, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= u.shape[-1]):
        raise ValueError(f"coordinates out of range for joint length {u.shape[-1]}")
    return u[..., idx]


def scatter_add(target: np.ndarray, coords, values, coeff: float = 1.0) -> None:
    """In place: ``target[..., coords[k]] += coeff * values[..., k]``."""
    idx = np.asarray(coords, dtype=np.int64)
    values = np.asarray(values)
    if values.shape[-1] != idx.size:
        raise ValueError(f"{values.shape[-1]} values for {idx.size} coordinates")
    if coeff == 0:
        return
    target[..., idx] += coeff * values


@dataclasses.dataclass
class NodeBinding:
    node: NodeRef
    model: ScoreModel
    condition: np.ndarray | None = None


class ComposedScore:
    """Callable joint score ``cs(u, t)`` for a factor graph of node models.

    ``bindings`` maps NodeRef -> model or NodeBinding. Bindings for nodes
    with coefficient 0 (leaf variables) are dropped; every other node must
    be bound.
    """

    def __init__(self, graph: FactorGraph, bindings, workers: int = 1, executor: Executor | None = None):
        self.graph = graph
        self.coefficients = bethe_coefficients(graph)
        if isinstance(bindings, Mapping):
            items = [b if isinstance(b, NodeBinding) else NodeBinding(n, b) for n, b in bindings.items()]
        else:
            items = list(bindings)
        by_node = {b.node: b for b in items}
        self.bindings: list[NodeBinding] = []
        for node in graph.nodes():
            if self.coefficients.coeff(node) == 0:
                continue
            if node not in by_node:
                raise ValueError(f"no score model bound to {node}")
            self.bindings.append(by_node[node])
        self._coords = [np.asarray(graph.coords(b.node), dtype=np.int64) for b in self.bindings]
        self._coeffs = [self.coefficients.coeff(b.node) for b in self.bindings]
        self.workers = max(1, int(workers))
        self._executor = executor
        self._owns_executor = False
        self._lock = threading.Lock()
        self.rounds = 0
        self.node_evaluations = 0

    # executor management -------------------------------------------------
    def _pool(self):
        if self._executor is None and self.workers > 1:
            self._executor = ThreadPoolExecutor(max_workers=self.workers)
            self._owns_executor = True
        return self._executor

    def close(self):
        if self._owns_executor and self._executor is not None:
            self._executor.shutdown()
            self._executor = None
            self._owns_executor = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def reset_counters(self):
        with self._lock:
            self.rounds = 0
            self.node_evaluations = 0

    @property
    def dim(self) -> int:
        return self.graph.layout.total_dim

    @property
    def supports_vjp(self) -> bool:
        return all(b.model.supports_vjp for b in self.bindings)

    # evaluation ------------------------------------------------------------
    def _map(self, fn):
        pool = self._pool() if len(self.bindings) > 1 else None
        if pool is None:
            return [fn(k) for k in range(len(self.bindings))]
        return list(pool.map(fn, range(len(self.bindings))))

    def _reduce(self, u, parts):
        out = np.zeros(u.shape, dtype=np.float64)
        for idx, coeff, part in zip(self._coords, self._coeffs, parts):
            scatter_add(out, idx, part, coeff)
        return out

    def _evaluate(self, u, node_fn):
        u = np.asarray(u, dtype=np.float64)
        if u.shape[-1] != self.dim:
            raise ValueError(f"joint vector has length {u.shape[-1]}, graph expects {self.dim}")

        def one(k):
            b = self.bindings[k]
            try:
                return node_fn(b, gather(u, self._coords[k]))
            except NumericalError as exc:
                raise NumericalError(f"{b.node}: {exc}") from exc

        parts = self._map(one)
        with self._lock:
            self.rounds += 1
            self.node_evaluations += len(parts)
        return self._reduce(u, parts)

    def __call__(self, u, t):
        return self._evaluate(u, lambda b, x: b.model(x, t, b.condition))

    def at_sigma(self, u, sigma):
        """Composed score at noise level ``sigma`` (sigma = 0 allowed for analytic models)."""
        return self._evaluate(u, lambda b, x: b.model.score(x, sigma, b.condition))

    def vjp(self, u, t, v):
        """(d composed score / d u)^T v, assembled node by node."""
        if not self.supports_vjp:
            raise CapabilityError("some bound model lacks VJP support")
        v = np.asarray(v, dtype=np.float64)
        u = np.asarray(u, dtype=np.float64)
        parts = self._map(
            lambda k: self.bindings[k].model.vjp(
                gather(u, self._coords[k]), t, gather(v, self._coords[k]), self.bindings[k].condition
            )
        )
        return self._reduce(v, parts)


def composed_score(cs: ComposedScore, u_joint, t):
    return cs(u_joint, t)


def gaussian_bindings(graph: FactorGraph, marginals: Mapping[NodeRef, GaussianMarginal],
                      schedule: NoiseSchedule) -> dict[NodeRef, GaussianScoreModel]:
    coeffs = bethe_coefficients(graph)
    return {
        node: GaussianScoreModel(m.mean, m.covariance, schedule)
        for node, m in marginals.items()
        if coeffs.coeff(node) != 0
    }


@dataclasses.dataclass(frozen=True)
class BetheGaussian:
    """Gaussian (possibly improper) implied by the signed sum of node precisions."""

    precision: np.ndarray
    shift: np.ndarray
    min_eigenvalue: float

    @property
    def proper(self) -> bool:
        return self.min_eigenvalue > 0

    def score(self, u) -> np.ndarray:
        return self.shift - np.asarray(u) @ self.precision.T

    @property
    def covariance(self) -> np.ndarray:
        if not self.proper:
            raise NumericalError("improper Bethe Gaussian: precision is not positive definite")
        return np.linalg.inv(self.precision)

    @property
    def mean(self) -> np.ndarray:
        if not self.proper:
            raise NumericalError("improper Bethe Gaussian: precision is not positive definite")
        return np.linalg.solve(self.precision, self.shift)


def composed_gaussian_oracle(graph: FactorGraph, marginals: Mapping[NodeRef, GaussianMarginal],
                             sigma: float) -> BetheGaussian:
    """Brute-force assembly of J_B = sum coeff * lift((Sigma_node + sigma^2 I)^-1) and h_B."""
    coeffs = bethe_coefficients(graph)
    N = graph.layout.total_dim
    J = np.zeros((N, N))
    h = np.zeros(N)
    for node in graph.nodes():
        c = coeffs.coeff(node)
        if c == 0:
            continue
        if node not in marginals:
            raise ValueError(f"missing Gaussian marginal for {node}")
        m = marginals[node]
        idx = list(graph.coords(node))
        prec = np.linalg.inv(m.covariance + sigma**2 * np.eye(len(idx)))
        J[np.ix_(idx, idx)] += c * prec
        h[idx] += c * (prec @ m.mean)
    J = 0.5 * (J + J.T)
    return BetheGaussian(J, h, float(np.linalg.eigvalsh(J).min()))
