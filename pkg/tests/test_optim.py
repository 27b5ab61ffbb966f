import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentlab.core import Linear, Norm, RngStream, Tensor, param
from latentlab.errors import ConfigError, DivergenceError
from latentlab.optim import BETAS, EPS, AdamW, EmaState, LRSchedule, decays, ema_update, lr_at_step, swap_in


def test_recipe_constants():
    assert BETAS == (0.9, 0.95)
    assert EPS == 1e-15


def test_warmup_and_peaks():
    for peak in (1e-4, 3e-3):
        s = LRSchedule("constant", peak=peak, warmup=1000, total_steps=250_000)
        assert lr_at_step(s, 0) == 0.0
        assert lr_at_step(s, 500) == peak * 500 / 1000
        assert lr_at_step(s, 1000) == peak
        assert lr_at_step(s, 249_999) == peak


def test_cosine_reaches_floor_exactly():
    s = LRSchedule("cosine", peak=1e-4, floor=3e-5, warmup=1000, total_steps=250_000)
    assert lr_at_step(s, 1000) == 1e-4
    assert lr_at_step(s, 250_000) == 3e-5
    assert lr_at_step(s, 400_000) == 3e-5
    mid = 1000 + (250_000 - 1000) // 2
    assert lr_at_step(s, mid) == pytest.approx((1e-4 + 3e-5) / 2, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 250_000))
def test_cosine_is_monotone_and_bounded(step):
    s = LRSchedule("cosine", peak=3e-3, floor=3e-5, warmup=1000, total_steps=250_000)
    lr = lr_at_step(s, step)
    assert 0.0 <= lr <= 3e-3
    if step >= 1000:
        assert lr >= 3e-5
        assert lr_at_step(s, step + 1) <= lr


def test_schedule_validation():
    with pytest.raises(ConfigError):
        LRSchedule("linear")
    with pytest.raises(ConfigError):
        LRSchedule(warmup=2000, total_steps=1000)
    with pytest.raises(ConfigError):
        LRSchedule("cosine", peak=1e-5, floor=3e-5)
    with pytest.raises(ValueError):
        lr_at_step(LRSchedule(), -1)


def test_adamw_scalar_step_by_hand():
    w = param(np.array([[2.0]]))
    opt = AdamW({"w": w}, weight_decay=0.1)
    lr, g1, g2 = 0.01, 0.5, -0.25
    w.grad = np.array([[g1]])
    opt.step(lr)
    # step 1: decay, then m = 0.1 g, v = 0.05 g^2, bias-corrected update
    theta = 2.0 * (1 - lr * 0.1)
    m, v = 0.1 * g1, 0.05 * g1 ** 2
    theta -= lr * (m / 0.1) / (math.sqrt(v / 0.05) + 1e-15)
    assert w.data[0, 0] == pytest.approx(theta, rel=1e-14)
    w.grad = np.array([[g2]])
    opt.step(lr)
    theta *= 1 - lr * 0.1
    m = 0.9 * m + 0.1 * g2
    v = 0.95 * v + 0.05 * g2 ** 2
    theta -= lr * (m / (1 - 0.9 ** 2)) / (math.sqrt(v / (1 - 0.95 ** 2)) + 1e-15)
    assert w.data[0, 0] == pytest.approx(theta, rel=1e-14)


def test_adamw_first_step_is_sign_scaled():
    w = param(np.zeros(3))
    opt = AdamW({"w": w}, weight_decay=0.0)
    w.grad = np.array([3.0, -1e-6, 0.0])
    opt.step(0.1)
    np.testing.assert_allclose(w.data, [-0.1, 0.1, 0.0], rtol=1e-8)


def test_weight_decay_exclusions():
    lin = Linear(3, 4, RngStream(0))
    norm = Norm(4, "layer_norm")
    assert decays("weight", lin.weight)
    assert not decays("bias", lin.bias)
    assert not decays("gain", norm.gain)
    table = param(np.ones((5, 2)), no_decay=True)
    assert not decays("pos", table)
    params = {"w": lin.weight, "b": lin.bias}
    before = {k: p.data.copy() for k, p in params.items()}
    for p in params.values():
        p.grad = np.zeros_like(p.data)
    AdamW(params, weight_decay=0.5).step(0.1)
    np.testing.assert_allclose(lin.weight.data, before["w"] * (1 - 0.05), rtol=1e-6)
    np.testing.assert_array_equal(lin.bias.data, before["b"])


def test_non_finite_gradient_raises():
    w = param(np.zeros(2))
    opt = AdamW({"w": w})
    w.grad = np.array([np.nan, 0.0])
    with pytest.raises(DivergenceError):
        opt.step(0.1)


def test_ema_recurrence_identities():
    p = param(np.array([1.0, -2.0]))
    ema = EmaState.init({"p": p}, decay=0.99, interval=100)
    ema.shadow["p"] = np.array([0.0, 0.0])
    ref = np.array([0.0, 0.0])
    for step in range(1, 1001):
        ema_update(ema, {"p": p}, step)
        if step % 100 == 0:
            ref = 0.99 * ref + (1 - 0.99) * p.data
    assert ema.updates == 10
    # same recurrence evaluated by hand: bit-exact
    np.testing.assert_array_equal(ema.shadow["p"], ref)
    # closed form of the linear recurrence for constant weights
    np.testing.assert_allclose(ema.shadow["p"], (1 - 0.99 ** 10) * p.data, rtol=1e-13)


def test_ema_skips_off_interval_steps_and_keeps_fixed_point():
    p = param(np.array([0.3, 0.7], np.float32))
    ema = EmaState.init({"p": p}, interval=100)
    for step in range(1, 500):
        ema_update(ema, {"p": p}, step)
    assert ema.updates == 4
    np.testing.assert_array_equal(ema.shadow["p"], p.data)
    with pytest.raises(ConfigError):
        EmaState.init({"p": p}, interval=0)


def test_ema_superposition():
    # the update is linear: EMA of a + b equals EMA of a plus EMA of b
    rng = np.random.default_rng(0)
    seq_a, seq_b = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))

    def run(seq):
        p = param(np.zeros(3))
        ema = EmaState.init({"p": p}, interval=1)
        for i, x in enumerate(seq, start=1):
            p.data = x.copy()
            ema_update(ema, {"p": p}, i)
        return ema.shadow["p"]

    np.testing.assert_allclose(run(seq_a + seq_b), run(seq_a) + run(seq_b), rtol=1e-12, atol=1e-14)


def test_swap_in_restores():
    p = param(np.array([1.0]))
    old = swap_in({"p": p}, {"p": np.array([5.0])})
    assert p.data[0] == 5.0
    swap_in({"p": p}, old)
    assert p.data[0] == 1.0
    assert isinstance(p, Tensor)


def test_zero_gradient_without_decay_is_a_no_op():
    w = param(np.array([1.5, -2.0]))
    opt = AdamW({"w": w}, weight_decay=0.0)
    for step in range(3):
        w.grad = np.zeros(2)
        opt.step(0.1)
    np.testing.assert_array_equal(w.data, [1.5, -2.0])


def test_quadratic_bowl_converges():
    w = param(np.array([3.0, -2.0, 0.5]))
    opt = AdamW({"w": w}, weight_decay=0.0)
    sched = LRSchedule("cosine", peak=0.1, floor=1e-4, warmup=10, total_steps=2000)
    for step in range(1, 2001):
        w.grad = 2 * w.data
        opt.step(lr_at_step(sched, step))
    assert np.abs(w.data).max() < 1e-3


def test_ema_decay_zero_and_geometric_gap():
    p = param(np.array([4.0]))
    ema = EmaState.init({"p": p}, decay=0.0, interval=1)
    ema.shadow["p"] = np.array([0.0])
    ema_update(ema, {"p": p}, 1)
    assert ema.shadow["p"][0] == 4.0
    ema = EmaState.init({"p": p}, decay=0.99, interval=1)
    ema.shadow["p"] = np.array([0.0])
    gaps = []
    for step in range(1, 6):
        ema_update(ema, {"p": p}, step)
        gaps.append(abs(ema.shadow["p"][0] - 4.0))
    np.testing.assert_allclose(np.array(gaps[1:]) / np.array(gaps[:-1]), 0.99, rtol=1e-12)
