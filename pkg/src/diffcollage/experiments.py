"""Reusable desk-scale experiments shared by the acceptance suite and scripts/."""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from . import rng as _rng
from .collage import ComposedScore, gaussian_bindings
from .conditioning import GuidanceConfig, autoregressive_outpaint, naive_concatenation
from .evaluation import drift_profile, fd_plus, seam_statistic
from .graph import FACTOR, NodeRef, build_chain, marginals_from_joint
from .sampler import SamplerConfig, sample_batch
from .schedule import NoiseSchedule
from .scoremodel import Dataset, DsmConfig, GaussianScoreModel, GmmScoreModel, train_node
from .testbeds import ou_covariance, ou_sample

# two-component 1D mixture used for the DSM check
GMM_WEIGHTS = (0.5, 0.5)
GMM_MEANS = (-1.0, 1.0)
GMM_VAR = 0.25


def gmm_data(gen: np.random.Generator, count: int, weights=GMM_WEIGHTS, means=GMM_MEANS, var=GMM_VAR):
    comp = gen.choice(len(weights), size=count, p=weights)
    return (np.asarray(means)[comp] + np.sqrt(var) * gen.standard_normal(count))[:, None]


@dataclasses.dataclass
class GmmResult:
    rel_l2: float
    train_seconds: float
    final_loss: float


def gmm_training(seed: int = 0, iterations: int = 10000, var: float = GMM_VAR, sigma: float = 0.5) -> GmmResult:
    """Train an MLP on the mixture and compare with the analytic noised score."""
    sched = NoiseSchedule("linear-ve", 0.01, 10.0)
    data = gmm_data(_rng.generator(seed, 0x6D6D), 10_000, var=var)
    cfg = DsmConfig(iterations=iterations, batch_size=512, learning_rate=2e-2,
                    sigma_min=0.1, sigma_max=3.0, rng_seed=seed)
    t0 = time.perf_counter()
    model = train_node(Dataset(data), (64, 64), cfg, sched)
    elapsed = time.perf_counter() - t0
    oracle = GmmScoreModel(GMM_WEIGHTS, [[m] for m in GMM_MEANS], [var, var], sched)
    u = np.linspace(-3, 3, 601)[:, None]
    exact = oracle.score(u, sigma)
    err = np.linalg.norm(model.score(u, sigma) - exact) / np.linalg.norm(exact)
    return GmmResult(float(err), elapsed, float(model.training_log["loss"][-200:].mean()))


@dataclasses.dataclass
class OrderingResult:
    seed: int
    fd: dict
    seam: dict
    spread: dict
    tau: dict
    ar_block_variance: list
    seconds: float


def ou_ordering(seed: int, count: int = 10_000, blocks: int = 16, factor_len: int = 8, overlap: int = 4,
                length_scale: float = 5.0, steps: int = 80, with_ar: bool = True) -> OrderingResult:
    """DiffCollage vs naive concatenation vs AR replacement on a stationary OU chain.

    All three use exact Gaussian node scores, so differences come only from
    how the long content is assembled.
    """
    t0 = time.perf_counter()
    sched = NoiseSchedule()
    graph = build_chain(blocks, factor_len, overlap)
    N = graph.layout.total_dim
    margs = marginals_from_joint(graph, np.zeros(N), ou_covariance(N, length_scale))
    scfg = SamplerConfig.make(sched, steps, seed=seed)
    base = GaussianScoreModel(np.zeros(factor_len), ou_covariance(factor_len, length_scale), sched)
    runs, block_sets, seams = {}, {}, {}

    with ComposedScore(graph, gaussian_bindings(graph, margs, sched)) as cs:
        x = sample_batch(cs, N, sched, scfg, count)
    runs["diffcollage"] = x
    block_sets["diffcollage"] = [x[:, list(graph.coords(NodeRef(FACTOR, j)))] for j in range(blocks)]
    seams["diffcollage"] = [j * (factor_len - overlap) for j in range(1, blocks)]

    x = naive_concatenation(base, factor_len, blocks, sched, scfg, count)
    runs["naive"] = x
    block_sets["naive"] = [x[:, j * factor_len:(j + 1) * factor_len] for j in range(blocks)]
    seams["naive"] = [j * factor_len for j in range(1, blocks)]

    if with_ar:
        res = autoregressive_outpaint(base, factor_len, blocks, overlap, GuidanceConfig(), sched, scfg, count)
        runs["ar_replacement"] = res.samples
        block_sets["ar_replacement"] = res.blocks
        seams["ar_replacement"] = seams["diffcollage"]

    ref = lambda n, g: ou_sample(g, n, factor_len, length_scale)  # noqa: E731
    fd, seam, spread, tau = {}, {}, {}, {}
    for name, x in runs.items():
        fd[name] = fd_plus(x, ref, factor_len, count, _rng.generator(seed, 7)).value
        seam[name] = seam_statistic(x, seams[name]).value
        prof = {r.name: r for r in drift_profile(block_sets[name])}
        spread[name] = prof["drift.spread"].value
        tau[name] = prof["drift.kendall_tau"].value
    ar_var = [float(b.var()) for b in block_sets.get("ar_replacement", [])]
    return OrderingResult(seed, fd, seam, spread, tau, ar_var, time.perf_counter() - t0)
