import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffcollage.collage import ComposedScore, NodeBinding, gaussian_bindings
from diffcollage.conditioning import (
    BoxDownOperator,
    GuidanceConfig,
    GuidedScore,
    MaskOperator,
    autoregressive_outpaint,
    block_seed,
    guided_sample_batch,
    make_operator,
    naive_concatenation,
    reconstruction_gradient,
    reconstruction_score,
    replacement_step,
    slerp,
)
from diffcollage.errors import CapabilityError
from diffcollage.graph import build_chain
from diffcollage.sampler import CountedScore, SamplerConfig, sample_batch
from diffcollage.schedule import NoiseSchedule
from diffcollage.scoremodel import GaussianScoreModel, MlpScoreModel, ScoreModel
from diffcollage.testbeds import ou_covariance, random_chain_gaussian

SCHED = NoiseSchedule("linear-ve", 0.01, 20.0)


class NoVjp(ScoreModel):
    schedule = SCHED

    def score(self, u, sigma, condition=None):
        return -np.asarray(u) / (1 + sigma**2)


def residual_loss(model, u, t, op, y):
    s2 = SCHED.sigma(t) ** 2
    return float(np.sum((op.apply(u + s2 * model(u, t)) - y) ** 2))


def fd_grad(f, u, h=1e-6):
    g = np.zeros_like(u)
    for k in range(u.size):
        e = np.zeros_like(u)
        e[k] = h
        g[k] = (f(u + e) - f(u - e)) / (2 * h)
    return g


def test_mask_examples():
    op = MaskOperator([0], 2)
    assert op.apply([1.0, 2.0]).tolist() == [1.0]
    assert op.apply_pinv([3.0]).tolist() == [3.0, 0.0]
    with pytest.raises(ValueError):
        MaskOperator([1, 0], 2)
    with pytest.raises(ValueError):
        MaskOperator([2], 2)
    with pytest.raises(ValueError):
        op.apply([1.0, 2.0, 3.0])


def test_boxdown_examples():
    op = BoxDownOperator(2, 4)
    assert op.apply([1.0, 3.0, 5.0, 7.0]).tolist() == [2.0, 6.0]
    assert op.apply_pinv([2.0, 6.0]).tolist() == [2.0, 2.0, 6.0, 6.0]
    assert op.apply_transpose([2.0, 6.0]).tolist() == [1.0, 1.0, 3.0, 3.0]
    with pytest.raises(ValueError):
        BoxDownOperator(3, 4)


def test_make_operator():
    assert isinstance(make_operator({"kind": "mask", "keep": [0, 2]}, 4), MaskOperator)
    assert make_operator({"kind": "boxdown", "block": 2}, 4).out_dim == 2
    with pytest.raises(ValueError):
        make_operator({"kind": "blur"}, 4)


@pytest.mark.parametrize("op", [MaskOperator([0, 3, 4], 6), BoxDownOperator(3, 6)])
def test_adjoint_and_pinv(op):
    gen = np.random.default_rng(0)
    for _ in range(100):
        x, y = gen.normal(size=op.in_dim), gen.normal(size=op.out_dim)
        assert abs(op.apply(x) @ y - x @ op.apply_transpose(y)) < 1e-12
        assert np.allclose(op.apply(op.apply_pinv(y)), y, atol=1e-14)


@given(st.integers(0, 2**31), st.sampled_from(["mask", "boxdown"]))
def test_projection_idempotent(seed, kind):
    gen = np.random.default_rng(seed)
    op = MaskOperator([1, 2, 5], 6) if kind == "mask" else BoxDownOperator(2, 6)
    u, y = gen.normal(size=op.in_dim), gen.normal(size=op.out_dim)
    once = op.project(u, y)
    assert np.allclose(op.project(once, y), once, atol=1e-12)
    assert np.allclose(op.apply(once), y, atol=1e-12)


def test_replacement_formula_example():
    sigma = 0.5
    t = sigma
    target = np.array([1.0, 2.0])
    # score that makes u + sigma^2 s = [1, 2]
    score = lambda u, tt: (target - u) / SCHED.sigma(tt) ** 2
    u = np.array([0.3, -0.4])
    s_tilde = replacement_step(score, u, t, MaskOperator([0], 2), np.array([3.0]), SCHED)
    assert np.allclose(u + sigma**2 * s_tilde, [3.0, 2.0], atol=1e-14)


def test_full_mask_pins_to_observation():
    y = np.array([1.0, -1.0, 0.5])
    u = np.array([0.2, 0.1, 0.0])
    model = GaussianScoreModel(np.zeros(3), np.eye(3), SCHED)
    s = replacement_step(model, u, 2.0, MaskOperator([0, 1, 2], 3), y, SCHED)
    assert np.allclose(s, (y - u) / 4.0, atol=1e-14)


def test_chain_inpainting_pins_observed_coordinates():
    g, mean, cov, margs = random_chain_gaussian(np.random.default_rng(1), 3, 4, 2)
    cs = ComposedScore(g, gaussian_bindings(g, margs, SCHED))
    N = g.layout.total_dim
    op = MaskOperator(range(0, N, 2), N)
    y = np.random.default_rng(2).normal(size=op.out_dim)
    x = guided_sample_batch(cs, N, op, y, GuidanceConfig(), SCHED, SamplerConfig.make(SCHED, 40), 64)
    assert np.abs(op.apply(x) - y).max() < 1e-12


def test_zero_residual_leaves_score_unchanged():
    model = GaussianScoreModel([0.0, 0.0], [[1.0, 0.4], [0.4, 1.0]], SCHED)
    u, t = np.array([0.7, -0.2]), 0.8
    op = MaskOperator([1], 2)
    y = op.apply(u + t**2 * model(u, t))
    cfg = GuidanceConfig(method="reconstruction", lam=3.0)
    assert np.allclose(reconstruction_score(model, u, t, op, y, cfg, SCHED), model(u, t), atol=1e-14)


@pytest.mark.parametrize("kind", ["gaussian", "mlp"])
@pytest.mark.parametrize("op", [MaskOperator([0, 2], 3), BoxDownOperator(3, 3)])
def test_exact_vjp_gradient_matches_finite_differences(kind, op):
    gen = np.random.default_rng(3)
    if kind == "gaussian":
        model = GaussianScoreModel(gen.normal(size=3), np.eye(3) + 0.3, SCHED)
    else:
        model = MlpScoreModel(3, (8, 8), SCHED, seed=5)
    for t in (0.05, 0.5, 3.0):
        u, y = gen.normal(size=3), gen.normal(size=op.out_dim)
        grad = reconstruction_gradient(model, u, t, op, y, SCHED, "exact-vjp")
        fd = fd_grad(lambda x: residual_loss(model, x, t, op, y), u)
        assert np.linalg.norm(grad - fd) <= 1e-6 * max(np.linalg.norm(fd), 1e-8)


def test_identity_jacobian_factor_in_1d():
    var, t = 2.0, 0.7
    model = GaussianScoreModel([0.0], [[var]], SCHED)
    op = MaskOperator([0], 1)
    u, y = np.array([1.3]), np.array([0.2])
    exact = reconstruction_gradient(model, u, t, op, y, SCHED, "exact-vjp")
    approx = reconstruction_gradient(model, u, t, op, y, SCHED, "identity-jacobian")
    ds_du = -1.0 / (var + t**2)
    assert exact[0] == pytest.approx(approx[0] * (1 + t**2 * ds_du), rel=1e-12)


def test_reconstruction_descends_residual():
    model = GaussianScoreModel([0.0, 0.0], np.eye(2), SCHED)
    op = MaskOperator([0], 2)
    u, y, t = np.array([0.5, 0.5]), np.array([2.0]), 0.5
    cfg = GuidanceConfig(method="reconstruction", lam=0.01, lambda_schedule="constant")
    before = residual_loss(model, u, t, op, y)
    step = reconstruction_score(model, u, t, op, y, cfg, SCHED) - model(u, t)
    assert residual_loss(model, u + 1e-3 * step / np.linalg.norm(step), t, op, y) < before


def test_capability_error_without_vjp():
    op = MaskOperator([0], 2)
    with pytest.raises(CapabilityError):
        reconstruction_gradient(NoVjp(), np.zeros(2), 1.0, op, np.zeros(1), SCHED, "exact-vjp")
    with pytest.raises(CapabilityError):
        GuidedScore(NoVjp(), op, np.zeros(1), GuidanceConfig(method="reconstruction", gradient_mode="exact-vjp"), SCHED)
    cfg = GuidanceConfig(method="reconstruction")
    assert cfg.resolved_mode(NoVjp()) == "identity-jacobian"
    assert cfg.resolved_mode(GaussianScoreModel([0.0], [[1.0]], SCHED)) == "exact-vjp"


def test_guidance_config_validation():
    with pytest.raises(ValueError):
        GuidanceConfig(method="reconstruction", lam=0.0)
    with pytest.raises(ValueError):
        GuidanceConfig(lambda_schedule="cosine")
    assert GuidanceConfig(lam=2.0).lambda_at(0.5) == pytest.approx(8.0)
    assert GuidanceConfig(lam=2.0, lambda_schedule="constant").lambda_at(0.5) == 2.0


def test_reconstruction_guidance_pulls_toward_observation():
    model = GaussianScoreModel(np.zeros(4), ou_covariance(4, 3.0), SCHED)
    op = MaskOperator([0, 1], 4)
    y = np.array([1.5, 1.2])
    cfg = GuidanceConfig(method="reconstruction", lam=0.5)
    x = guided_sample_batch(model, 4, op, y, cfg, SCHED, SamplerConfig.make(SCHED, 60), 256)
    free = sample_batch(model, 4, SCHED, SamplerConfig.make(SCHED, 60), 256)
    assert np.abs(op.apply(x) - y).mean() < np.abs(op.apply(free) - y).mean()


def test_ar_single_block_equals_plain_sampling():
    model = GaussianScoreModel(np.zeros(4), ou_covariance(4, 3.0), SCHED)
    cfg = SamplerConfig.make(SCHED, 20, seed=8)
    res = autoregressive_outpaint(model, 4, 1, 2, GuidanceConfig(), SCHED, cfg, 10)
    assert np.array_equal(res.samples, sample_batch(model, 4, SCHED, cfg, 10))


@pytest.mark.parametrize("L", [2, 4, 8])
def test_ar_sequential_call_count(L):
    model = GaussianScoreModel(np.zeros(4), ou_covariance(4, 3.0), SCHED)
    cfg = SamplerConfig.make(SCHED, 50, final_denoise=False)
    res = autoregressive_outpaint(model, 4, L, 2, GuidanceConfig(), SCHED, cfg, 8)
    assert res.sequential_calls == L * 50
    assert res.samples.shape == (8, L * 4 - (L - 1) * 2)


def test_ar_blocks_agree_on_overlap():
    model = GaussianScoreModel(np.zeros(4), ou_covariance(4, 3.0), SCHED)
    res = autoregressive_outpaint(model, 4, 3, 2, GuidanceConfig(), SCHED, SamplerConfig.make(SCHED, 20), 16)
    for a, b in zip(res.blocks, res.blocks[1:]):
        assert np.array_equal(a[:, -2:], b[:, :2])


def test_ar_workers_bit_identical():
    model = GaussianScoreModel(np.zeros(4), ou_covariance(4, 3.0), SCHED)
    cfg = SamplerConfig.make(SCHED, 10, method="euler-maruyama", eta=1.0, seed=3)
    a = autoregressive_outpaint(model, 4, 3, 2, GuidanceConfig(), SCHED, cfg, 600, workers=1)
    b = autoregressive_outpaint(model, 4, 3, 2, GuidanceConfig(), SCHED, cfg, 600, workers=4)
    assert np.array_equal(a.samples, b.samples)


def test_ar_argument_checks():
    model = GaussianScoreModel(np.zeros(4), np.eye(4), SCHED)
    cfg = SamplerConfig.make(SCHED, 5)
    with pytest.raises(ValueError):
        autoregressive_outpaint(model, 4, 0, 2, GuidanceConfig(), SCHED, cfg, 2)
    with pytest.raises(ValueError):
        autoregressive_outpaint(model, 4, 2, 4, GuidanceConfig(), SCHED, cfg, 2)


def test_naive_concatenation_blocks_are_independent_draws():
    model = GaussianScoreModel(np.zeros(3), np.eye(3), SCHED)
    cfg = SamplerConfig.make(SCHED, 10, seed=1)
    x = naive_concatenation(model, 3, 2, SCHED, cfg, 5)
    assert x.shape == (5, 6)
    assert np.array_equal(x[:, :3], sample_batch(model, 3, SCHED, cfg, 5))
    assert block_seed(1, 0) == 1 and block_seed(1, 1) != 1


def test_slerp_examples():
    a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert np.allclose(slerp(a, b, 0.0), a)
    assert np.allclose(slerp(a, b, 1.0), b)
    assert np.allclose(slerp(a, b, 0.5), (a + b) / math.sqrt(2), atol=1e-15)
    for tau in (0.0, 0.3, 1.0):
        assert np.allclose(slerp(a, a, tau), a)


def test_slerp_errors():
    with pytest.raises(ValueError):
        slerp(np.zeros(2), np.ones(2), 0.5)
    with pytest.raises(ValueError):
        slerp(np.ones(2), np.ones(2), 1.5)
    with pytest.raises(ValueError):
        slerp(np.array([1.0, 0.0]), np.array([-1.0, 0.0]), 0.5)


vectors = st.lists(st.floats(-5, 5), min_size=3, max_size=3).map(np.array).filter(lambda v: np.linalg.norm(v) > 1e-2)


@given(vectors, vectors, st.floats(0, 1))
def test_slerp_norm_is_interpolated(a, b, tau):
    ua, ub = a / np.linalg.norm(a), b / np.linalg.norm(b)
    if ua @ ub < -1 + 1e-6:
        return
    out = slerp(a, b, tau)
    expected = (1 - tau) * np.linalg.norm(a) + tau * np.linalg.norm(b)
    assert abs(np.linalg.norm(out) - expected) < 1e-12 * max(1.0, expected)


def test_style_bridge_smoke():
    g = build_chain(4, 4, 2)
    a, b = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    model = MlpScoreModel(4, (8,), SCHED, cond_dim=3, half_width=True, seed=0)
    binds = []
    for node in g.nodes():
        if node.kind == "factor":
            cond = slerp(a, b, node.index / (g.num_factors - 1))
        else:
            cond = np.zeros(3)
        binds.append(NodeBinding(node, model, cond))
    cs = ComposedScore(g, binds)
    x = sample_batch(cs, g.layout.total_dim, SCHED, SamplerConfig.make(SCHED, 20), 4)
    assert np.isfinite(x).all()
