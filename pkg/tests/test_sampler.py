import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffcollage import rng
from diffcollage.collage import ComposedScore, gaussian_bindings
from diffcollage.errors import SamplerError
from diffcollage.schedule import NoiseSchedule
from diffcollage.sampler import CountedScore, SamplerConfig, member_seeds, sample, sample_batch, sample_prior
from diffcollage.scoremodel import GaussianScoreModel
from diffcollage.testbeds import random_chain_gaussian

SCHED = NoiseSchedule("linear-ve", 0.01, 20.0)


def exact_flow(u_T, mean, var, s_start, s_end):
    """Probability-flow transport of a 1D Gaussian plus the posterior-mean jump."""
    u = mean + (u_T - mean) * math.sqrt((var + s_end**2) / (var + s_start**2))
    return mean + (u - mean) * var / (var + s_end**2)


def test_config_validation():
    grid = SamplerConfig.make(SCHED, 10).grid
    with pytest.raises(ValueError):
        SamplerConfig(grid, eta=0.5, method="euler-ode")
    with pytest.raises(ValueError):
        SamplerConfig(grid, eta=0.5, method="heun")
    with pytest.raises(ValueError):
        SamplerConfig(grid, eta=-1.0, method="euler-maruyama")
    with pytest.raises(ValueError):
        SamplerConfig(grid, method="ddim")
    assert SamplerConfig(grid, eta=1.0, method="euler-maruyama").stochastic


def test_prior_std():
    x = sample_prior(100_000, NoiseSchedule("linear-ve", 0.01, 10.0), 10.0, rng.generator(0))
    assert 9.9 <= x.std() <= 10.1


def test_prior_is_deterministic():
    a = sample_prior(5, SCHED, 20.0, rng.generator(3))
    b = sample_prior(5, SCHED, 20.0, rng.generator(3))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        sample_prior(0, SCHED, 20.0, rng.generator(3))


def test_ode_gaussian_moments_match_transport_oracle():
    # the prior N(0, 400) is not the noised data marginal N(2, 401), so the exact
    # flow lands at mean 2 - 2/sqrt(401), not 2
    model = GaussianScoreModel([2.0], [[1.0]], SCHED)
    cfg = SamplerConfig.make(SCHED, 200, seed=11)
    x = sample_batch(model, 1, SCHED, cfg, 4096)[:, 0]
    mean_oracle = exact_flow(0.0, 2.0, 1.0, 20.0, 0.01)
    var_oracle = 400 * (exact_flow(1.0, 2.0, 1.0, 20.0, 0.01) - mean_oracle) ** 2
    se = math.sqrt(var_oracle / 4096)
    assert abs(x.mean() - mean_oracle) < 4 * se + 0.01
    assert 0.85 <= x.var(ddof=1) <= 1.15


def test_em_gaussian_moments():
    model = GaussianScoreModel([2.0], [[1.0]], SCHED)
    cfg = SamplerConfig.make(SCHED, 200, eta=1.0, method="euler-maruyama", seed=11)
    x = sample_batch(model, 1, SCHED, cfg, 4096)[:, 0]
    assert 1.9 <= x.mean() <= 2.1
    assert 0.85 <= x.var(ddof=1) <= 1.15


def test_zero_score_transports_prior_unchanged():
    cfg = SamplerConfig.make(SCHED, 30, seed=5, final_denoise=False)
    out = sample(lambda u, t: np.zeros_like(u), 4, SCHED, cfg)
    prior = sample_prior(4, SCHED, cfg.grid.times[0], rng.generator(5))
    assert np.array_equal(out, prior)


def test_heun_beats_euler_at_20_steps():
    model = GaussianScoreModel([2.0], [[1.0]], SCHED)
    err = {"euler-ode": 0.0, "heun": 0.0}
    for seed in range(10):
        prior_batch = None
        for method in err:
            cfg = SamplerConfig.make(SCHED, 20, method=method, seed=seed)
            x = sample_batch(model, 1, SCHED, cfg, 512)[:, 0]
            if prior_batch is None:
                seeds = member_seeds(seed, 512)
                prior_batch = np.array([sample_prior(1, SCHED, 20.0, rng.generator(s))[0] for s in seeds])
                ref = exact_flow(prior_batch, 2.0, 1.0, 20.0, 0.01)
            err[method] += (x.mean() - ref.mean()) ** 2 + (x.var() - ref.var()) ** 2
    assert err["heun"] < err["euler-ode"]


@pytest.mark.parametrize("method,steps,expected", [("euler-ode", 25, 25), ("euler-maruyama", 25, 25), ("heun", 25, 49)])
def test_call_counts(method, steps, expected):
    counted = CountedScore(lambda u, t: -u / (1 + t * t))
    eta = 1.0 if method == "euler-maruyama" else 0.0
    cfg = SamplerConfig.make(SCHED, steps, method=method, eta=eta, final_denoise=False)
    sample(counted, 3, SCHED, cfg)
    assert counted.calls == expected
    counted.calls = 0
    sample(counted, 3, SCHED, SamplerConfig.make(SCHED, steps, method=method, eta=eta))
    assert counted.calls == expected + 1


@pytest.mark.parametrize("method", ["euler-ode", "euler-maruyama", "heun"])
def test_batch_of_one_equals_sample_with_derived_seed(method):
    model = GaussianScoreModel([0.5, -0.5], [[1.0, 0.3], [0.3, 1.0]], SCHED)
    eta = 0.7 if method == "euler-maruyama" else 0.0
    cfg = SamplerConfig.make(SCHED, 20, method=method, eta=eta, seed=99)
    one = sample_batch(model, 2, SCHED, cfg, 1)[0]
    direct = sample(model, 2, SCHED, SamplerConfig.make(SCHED, 20, method=method, eta=eta,
                                                       seed=rng.derive_seed(99, 0)))
    assert np.array_equal(one, direct)


@pytest.mark.parametrize("workers", [2, 4, 8])
def test_batch_bit_identical_across_workers(workers):
    model = GaussianScoreModel([0.0, 1.0], [[1.0, 0.2], [0.2, 0.5]], SCHED)
    cfg = SamplerConfig.make(SCHED, 15, method="euler-maruyama", eta=1.0, seed=4)
    serial = sample_batch(model, 2, SCHED, cfg, 700, workers=1)
    assert np.array_equal(sample_batch(model, 2, SCHED, cfg, 700, workers=workers), serial)


def test_batch_prefix_is_stable():
    model = GaussianScoreModel([0.0], [[1.0]], SCHED)
    cfg = SamplerConfig.make(SCHED, 10, seed=2)
    big = sample_batch(model, 1, SCHED, cfg, 300)
    small = sample_batch(model, 1, SCHED, cfg, 50)
    assert np.array_equal(big[:50], small)


def test_batch_error_shrinks_with_count():
    model = GaussianScoreModel([0.0], [[1.0]], SCHED)
    errs = []
    for n in (256, 4096):
        e = 0.0
        for seed in range(6):
            x = sample_batch(model, 1, SCHED, SamplerConfig.make(SCHED, 40, method="euler-maruyama", eta=1.0, seed=seed), n)
            e += x.mean() ** 2
        errs.append(e / 6)
    assert errs[1] < errs[0]


def test_non_finite_state_names_step():
    def bad(u, t):
        return np.full_like(u, np.inf) if t < 5 else np.zeros_like(u)

    with pytest.raises(SamplerError, match="step"):
        sample(bad, 2, SCHED, SamplerConfig.make(SCHED, 20))


def test_composed_chain_sampling_recovers_covariance():
    g, mean, cov, margs = random_chain_gaussian(rng.generator(3), 4, 4, 2)
    sched = NoiseSchedule()
    cs = ComposedScore(g, gaussian_bindings(g, margs, sched))
    x = sample_batch(cs, g.layout.total_dim, sched, SamplerConfig.make(sched, 200, seed=1), 2048)
    emp = np.cov(x, rowvar=False)
    assert np.linalg.norm(emp - cov) < 0.15 * np.linalg.norm(cov)
    assert np.abs(x.mean(axis=0) - mean).max() < 0.15


@given(st.integers(0, 2**63), st.integers(1, 8))
def test_sampling_is_pure(seed, dim):
    model = GaussianScoreModel(np.zeros(dim), np.eye(dim), SCHED)
    cfg = SamplerConfig.make(SCHED, 5, method="euler-maruyama", eta=0.5, seed=seed)
    assert np.array_equal(sample(model, dim, SCHED, cfg), sample(model, dim, SCHED, cfg))
