"""Gaussian testbeds with exactly known joints and marginals."""

from __future__ import annotations

import numpy as np

from .graph import FactorGraph, build_chain, marginals_from_joint


def ou_covariance(n: int, length_scale: float, variance: float = 1.0) -> np.ndarray:
    """Stationary discretised OU process: cov[i, j] = variance * a^|i-j|, a = exp(-1/length_scale)."""
    a = np.exp(-1.0 / length_scale)
    lag = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    return variance * a**lag


def ou_sample(gen: np.random.Generator, count: int, n: int, length_scale: float, variance: float = 1.0) -> np.ndarray:
    """Exact draws of the stationary AR(1) chain x_{k+1} = a x_k + sqrt(1 - a^2) xi."""
    a = np.exp(-1.0 / length_scale)
    xi = gen.standard_normal((count, n))
    out = np.empty((count, n))
    out[:, 0] = xi[:, 0]
    scale = np.sqrt(1 - a * a)
    for k in range(1, n):
        out[:, k] = a * out[:, k - 1] + scale * xi[:, k]
    return np.sqrt(variance) * out


def markov_precision(graph: FactorGraph, gen: np.random.Generator, ridge: float = 0.5, scale: float = 1.0) -> np.ndarray:
    """Random SPD precision whose sparsity follows the factors.

    Sum of random PSD blocks lifted onto each factor, plus ``ridge * I``; the
    resulting joint is Markov with respect to the factor graph.
    """
    N = graph.layout.total_dim
    J = ridge * np.eye(N)
    for f in graph.factors:
        k = len(f)
        B = scale * gen.standard_normal((k, k)) / np.sqrt(k)
        J[np.ix_(f, f)] += B @ B.T
    return 0.5 * (J + J.T)


def random_markov_gaussian(graph: FactorGraph, gen: np.random.Generator, ridge: float = 0.5, scale: float = 1.0):
    """(mean, covariance) of a random Gaussian that factorises over ``graph``."""
    J = markov_precision(graph, gen, ridge, scale)
    cov = np.linalg.inv(J)
    cov = 0.5 * (cov + cov.T)
    mean = gen.normal(0, 1, size=graph.layout.total_dim)
    return mean, cov


def random_chain_gaussian(gen: np.random.Generator, num_factors: int, factor_len: int, overlap: int):
    """Chain graph plus a Markov joint Gaussian and its exact node marginals."""
    graph = build_chain(num_factors, factor_len, overlap)
    mean, cov = random_markov_gaussian(graph, gen)
    return graph, mean, cov, marginals_from_joint(graph, mean, cov)


def joint_gaussian_score(mean, cov, u, sigma: float) -> np.ndarray:
    """Dense-solve score of N(mean, cov + sigma^2 I)."""
    A = np.asarray(cov) + sigma**2 * np.eye(len(mean))
    r = np.atleast_2d(u) - mean
    out = -np.linalg.solve(A, r.T).T
    return out[0] if np.ndim(u) == 1 else out


def ring_ou_covariance(n: int, length_scale: float, variance: float = 1.0) -> np.ndarray:
    """Stationary OU on a ring: c(d) proportional to a^d + a^(n - d)."""
    a = np.exp(-1.0 / length_scale)
    idx = np.arange(n)
    d = np.abs(np.subtract.outer(idx, idx))
    return variance * (a**d + a ** (n - d)) / (1 + a**n)


def layout_covariance(layout, length_scale: float, variance: float = 1.0) -> np.ndarray:
    """Exponential-decay covariance matched to a layout's geometry.

    Sequences use the OU chain, rings the periodic OU, 2D content a separable
    product over the pixel map; anything else falls back to index distance.
    """
    n = layout.total_dim
    if layout.kind == "ring":
        return ring_ou_covariance(n, length_scale, variance)
    if layout.kind == "image":
        a = np.exp(-1.0 / length_scale)
        if layout.pixels is not None:
            pix = np.asarray(layout.pixels)
        else:
            h, w = layout.shape
            pix = np.stack(np.unravel_index(np.arange(n), (h, w)), axis=1)
        d = np.abs(pix[:, None, 0] - pix[None, :, 0]) + np.abs(pix[:, None, 1] - pix[None, :, 1])
        return variance * a**d
    return ou_covariance(n, length_scale, variance)


def gaussian_draws(gen: np.random.Generator, count: int, mean, cov) -> np.ndarray:
    L = np.linalg.cholesky(np.asarray(cov) + 1e-12 * np.eye(len(mean)))
    return np.asarray(mean) + gen.standard_normal((count, len(mean))) @ L.T
