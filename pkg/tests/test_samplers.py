import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentlab.accounting import forward_flops
from latentlab.backbone import BackboneConfig, ConditioningInput, build
from latentlab.core import RngStream, no_grad
from latentlab.errors import ConfigError
from latentlab.samplers import (
    SamplerConfig,
    cfg_combine,
    euler_integrate,
    gaussian_eps,
    generate,
    inference_flops,
    masked_schedule_counts,
    nucleus_filter,
    nucleus_sample,
    point_mass_eps,
    sample_diffusion,
    sample_masked,
    sample_next_token_seq,
    velocity_from_noise,
)


def jittered(objective, seed=0, **kw):
    base = dict(objective=objective, layers=2, hidden=32, heads=4, vocab_size=10, latent_channels=2,
                cond_dim=4, seq_len=8)
    base.update(kw)
    m = build(BackboneConfig(**base), seed)
    rng = np.random.default_rng(seed)
    for p in m.parameters().values():
        p.data = (p.data + 0.3 * rng.standard_normal(p.shape)).astype(np.float32)
    return m


def cond(B, seed=0):
    return ConditioningInput.of(np.random.default_rng(seed).standard_normal((B, 4)))


def test_defaults_per_objective():
    assert SamplerConfig.for_objective("flow_matching").steps == 50
    assert SamplerConfig.for_objective("flow_matching").cfg_scale == 5.0
    assert SamplerConfig.for_objective("masked_token").steps == 10
    assert SamplerConfig.for_objective("next_token").cfg_scale == 8.0
    assert SamplerConfig.for_objective("masked_token", steps=4).steps == 4
    for bad in (dict(top_p=0.0), dict(temperature=0.0), dict(steps=0), dict(remask="greedy")):
        with pytest.raises(ConfigError):
            SamplerConfig(**bad)


def test_cfg_combine():
    c, u = np.array([1.0, 2.0]), np.array([0.5, 3.0])
    np.testing.assert_array_equal(cfg_combine(c, u, 0.0), c)
    np.testing.assert_allclose(cfg_combine(c, u, 2.0), 3 * c - 2 * u)
    with pytest.raises(ValueError):
        cfg_combine(c, np.ones(3), 1.0)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0.001, 1.0), min_size=1, max_size=12), st.floats(0.01, 1.0))
def test_nucleus_keeps_smallest_sufficient_prefix(weights, top_p):
    p = np.array(weights) / np.sum(weights)
    q = nucleus_filter(p, top_p)
    kept = q > 0
    assert q.sum() == pytest.approx(1.0)
    assert p[kept].sum() >= top_p - 1e-12 or kept.all()
    # dropping the least likely kept entry must fall below top_p
    if kept.sum() > 1:
        assert p[kept].sum() - p[kept].min() < top_p + 1e-12
    # kept entries are the most likely ones
    if (~kept).any():
        assert p[kept].min() >= p[~kept].max()
    np.testing.assert_allclose(q[kept], p[kept] / p[kept].sum())


def test_nucleus_sample_frequencies():
    logits = np.log(np.array([[0.5, 0.3, 0.15, 0.05]]))
    r = RngStream(1)
    ids = nucleus_sample(np.repeat(logits, 20000, 0), 0.9, 1.0, r)
    freq = np.bincount(ids, minlength=4) / ids.size
    np.testing.assert_allclose(freq, [0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95, 0.0], atol=0.01)


def test_kv_cached_sampling_equals_full_prefix_sampling():
    model = jittered("next_token", seed=1)
    c = cond(3)
    sampler = SamplerConfig(cfg_scale=2.0, top_p=0.95)
    fast = sample_next_token_seq(model, c, sampler, RngStream(5))
    # reference: recompute the whole prefix at every step
    rng = RngStream(5)
    seq = np.full((3, 1), model.mask_id)
    out = []
    with no_grad():
        for _ in range(8):
            lc = model(seq, c).data[:, -1]
            lu = model(seq, c.as_null()).data[:, -1]
            tok = nucleus_sample(cfg_combine(lc, lu, 2.0), 0.95, 1.0, rng)
            out.append(tok)
            seq = np.concatenate([seq, tok[:, None]], axis=1)
    np.testing.assert_array_equal(fast, np.stack(out, 1))


@pytest.mark.parametrize("objective", ["next_token", "masked_token", "flow_matching"])
def test_cfg_zero_equals_conditional(objective):
    model = jittered(objective, seed=2)
    c = cond(2)
    s0 = SamplerConfig(cfg_scale=0.0, steps=4)
    if objective == "next_token":
        a = sample_next_token_seq(model, c, s0, RngStream(3))
        b = sample_next_token_seq(model, c, s0, RngStream(3), guided=False)
    elif objective == "masked_token":
        a = sample_masked(model, c, s0, RngStream(3))
        b = sample_masked(model, c, s0, RngStream(3), guided=False)
    else:
        a = sample_diffusion(model, c, s0, rng=RngStream(3))
        b = sample_diffusion(model, c, s0, rng=RngStream(3), guided=False)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("steps,s", [(10, 8), (10, 256), (7, 33), (1, 5)])
def test_masked_trajectory_follows_schedule(steps, s):
    model = jittered("masked_token", seq_len=s)
    traj = []
    out = sample_masked(model, cond(2), SamplerConfig(steps=steps), RngStream(0), trajectory=traj)
    expected = [int(np.round(np.cos(np.pi * (i / steps) / 2) * s)) for i in range(steps)] + [0]
    assert traj == expected == masked_schedule_counts(steps, s)
    assert not (out == model.mask_id).any()


def test_confidence_remasking_finishes():
    model = jittered("masked_token")
    out = sample_masked(model, cond(2), SamplerConfig(steps=5, remask="confidence"), RngStream(0))
    assert out.shape == (2, 8) and out.max() < 10


def test_velocity_from_noise_guard():
    v = velocity_from_noise(np.ones(2), np.zeros(2), 1.0)
    np.testing.assert_allclose(v, 1.0 / 1e-3)


def test_point_mass_oracle():
    rng = np.random.default_rng(0)
    mu = rng.standard_normal(16)
    z1 = rng.standard_normal((32, 16))
    errs = {n: np.abs(euler_integrate(point_mass_eps(mu), z1, n) - mu).max() for n in (4, 8, 16, 50)}
    assert errs[50] < 1e-2
    assert errs[50] <= errs[4]


def test_gaussian_oracle_error_decreases():
    rng = np.random.default_rng(1)
    mu, sigma = rng.standard_normal(8), 0.5
    z1 = rng.standard_normal((64, 8))
    target = mu + sigma * z1
    errs = [np.abs(euler_integrate(gaussian_eps(mu, sigma), z1, n) - target).max() for n in (4, 8, 16, 32, 50)]
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 0.05


def test_generate_shapes():
    for objective, shape in (("next_token", (2, 8)), ("masked_token", (2, 8)), ("flow_matching", (2, 8, 2))):
        model = jittered(objective)
        out = generate(model, cond(2), SamplerConfig.for_objective(objective, steps=3), RngStream(0))
        assert out.shape == shape


def test_sampler_checks_model_kind():
    with pytest.raises(ConfigError):
        sample_next_token_seq(jittered("masked_token"), cond(1), SamplerConfig())
    with pytest.raises(ConfigError):
        sample_masked(jittered("next_token"), cond(1), SamplerConfig())


def test_inference_flops():
    cfg = BackboneConfig(objective="flow_matching", seq_len=64)
    f = forward_flops(cfg).total
    s = SamplerConfig.for_objective("flow_matching")
    assert inference_flops(cfg, s) == 2 * 50 * f
    assert inference_flops(cfg, s, include_cfg=False) == 50 * f
    nt = BackboneConfig(objective="next_token", seq_len=64)
    assert inference_flops(nt, SamplerConfig()) == 2 * forward_flops(nt).total


def test_cfg_combine_examples():
    assert cfg_combine(np.array(2.0), np.array(1.0), 5.0) == 7.0
    x = np.array([0.3, -1.2])
    np.testing.assert_array_equal(cfg_combine(x, x, 9.0), x)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8), st.floats(-3, 3), st.floats(0, 10))
def test_cfg_argmax_ignores_shared_offset(values, c, w):
    xc = np.array(values)
    xu = np.roll(xc, 1)
    base = cfg_combine(xc, xu, w)
    shifted = cfg_combine(xc + c, xu + c, w)
    np.testing.assert_allclose(shifted, base + c, atol=1e-9)
    top = np.flatnonzero(base >= base.max() - 1e-9)
    assert np.argmax(shifted) in top


def test_nucleus_examples():
    np.testing.assert_allclose(nucleus_filter(np.array([0.5, 0.3, 0.2]), 0.75), [0.625, 0.375, 0.0])
    logits = np.random.default_rng(0).standard_normal((50, 9))
    greedy = nucleus_sample(logits, 1e-9, 1.0, RngStream(0))
    np.testing.assert_array_equal(greedy, logits.argmax(-1))


def test_full_distribution_frequencies():
    p = np.array([0.4, 0.25, 0.2, 0.1, 0.05])
    ids = nucleus_sample(np.repeat(np.log(p)[None], 100_000, 0), 1.0, 1.0, RngStream(2))
    np.testing.assert_allclose(np.bincount(ids, minlength=5) / ids.size, p, atol=0.01)


def test_single_masked_step_fills_everything_at_once():
    model = jittered("masked_token", seq_len=12)
    traj = []
    out = sample_masked(model, cond(3), SamplerConfig(steps=1), RngStream(0), trajectory=traj)
    assert traj == [12, 0]
    assert not (out == model.mask_id).any()


def test_single_euler_step_from_zero_model():
    model = build(BackboneConfig(objective="flow_matching", layers=1, hidden=16, heads=2, latent_channels=2,
                                 cond_dim=4, seq_len=3), 0)
    z1 = np.random.default_rng(0).standard_normal((2, 3, 2))
    out = sample_diffusion(model, cond(2), SamplerConfig(steps=1, cfg_scale=0.0), z1=z1)
    # eps_hat = 0 at t = 1 - delta: v = -z1 / delta, z0 = z1 - 1 * v
    delta = 1e-3
    np.testing.assert_allclose(out, z1 - (0.0 - z1) / delta, rtol=1e-6)


def test_inference_flop_ratios():
    fm = BackboneConfig(objective="flow_matching", seq_len=64)
    one = inference_flops(fm, SamplerConfig.for_objective("flow_matching", steps=1))
    fifty = inference_flops(fm, SamplerConfig.for_objective("flow_matching", steps=50))
    assert fifty == 50 * one
    mt = BackboneConfig(objective="masked_token", seq_len=64, vocab_size=4)
    same_head = BackboneConfig(objective="flow_matching", seq_len=64, latent_channels=4)
    nt = BackboneConfig(objective="next_token", seq_len=64)
    assert inference_flops(nt, SamplerConfig(steps=3)) == inference_flops(nt, SamplerConfig(steps=40))
    ten = inference_flops(mt, SamplerConfig.for_objective("masked_token"))
    per_step_mt = forward_flops(mt).total
    per_step_fm = forward_flops(same_head).total
    assert ten / per_step_mt / (inference_flops(same_head, SamplerConfig.for_objective("flow_matching"))
                                / per_step_fm) == 10 / 50
