"""Finite-difference cases shared by the unit and acceptance suites.

Every case is ``(name, f, inputs)`` where ``f(*inputs)`` is a scalar tensor and
all inputs are float64 leaves.
"""
from __future__ import annotations

import numpy as np

from latentlab.backbone import BackboneConfig
from latentlab.backbone.model import Block
from latentlab.core import RngStream, Tensor, ops


def _x(rng, *shape, lo=None):
    a = rng.standard_normal(shape)
    if lo is not None:
        a = np.abs(a) + lo
    return Tensor(a, dtype=np.float64)


def _reduce(y: Tensor, seed: int = 99) -> Tensor:
    """Weighted sum with fixed random weights, so every output entry matters."""
    w = np.random.default_rng(seed).standard_normal(y.shape)
    return ops.sum(ops.mul(y, Tensor(w)))


def op_cases():
    r = np.random.default_rng(0)
    cases = []

    def add(name, f, *inputs):
        cases.append((name, f, list(inputs)))

    add("add_broadcast", lambda a, b: _reduce(ops.add(a, b)), _x(r, 3, 4), _x(r, 4))
    add("sub", lambda a, b: _reduce(ops.sub(a, b)), _x(r, 3, 4), _x(r, 3, 1))
    add("mul", lambda a, b: _reduce(ops.mul(a, b)), _x(r, 2, 3), _x(r, 2, 3))
    add("div", lambda a, b: _reduce(ops.div(a, b)), _x(r, 2, 3), _x(r, 3, lo=0.5))
    add("neg", lambda a: _reduce(ops.neg(a)), _x(r, 5))
    add("power", lambda a: _reduce(ops.power(a, 1.7)), _x(r, 5, lo=0.3))
    add("square", lambda a: _reduce(ops.square(a)), _x(r, 5))
    add("exp", lambda a: _reduce(ops.exp(a)), _x(r, 5))
    add("log", lambda a: _reduce(ops.log(a)), _x(r, 5, lo=0.3))
    add("sqrt", lambda a: _reduce(ops.sqrt(a)), _x(r, 5, lo=0.3))
    add("tanh", lambda a: _reduce(ops.tanh(a)), _x(r, 5))
    add("sigmoid", lambda a: _reduce(ops.sigmoid(a)), _x(r, 5))
    relu_in = _x(r, 6)
    relu_in.data[np.abs(relu_in.data) < 0.05] = 0.3  # keep away from the kink
    add("relu", lambda a: _reduce(ops.relu(a)), relu_in)
    add("cast", lambda a: _reduce(ops.cast(a, np.float64)), _x(r, 4))
    mask = r.random((3, 4)) < 0.5
    add("where", lambda a, b: _reduce(ops.where(mask, a, b)), _x(r, 3, 4), _x(r, 4))
    add("masked_fill", lambda a: _reduce(ops.masked_fill(a, mask, -3.0)), _x(r, 3, 4))
    add("matmul_2d", lambda a, b: _reduce(ops.matmul(a, b)), _x(r, 3, 4), _x(r, 4, 5))
    add("matmul_batched", lambda a, b: _reduce(ops.matmul(a, b)), _x(r, 2, 3, 4), _x(r, 2, 4, 5))
    add("matmul_flat", lambda a, b: _reduce(ops.matmul(a, b)), _x(r, 2, 3, 4), _x(r, 4, 2))
    add("matmul_broadcast", lambda a, b: _reduce(ops.matmul(a, b)), _x(r, 2, 1, 3, 4), _x(r, 3, 4, 2))
    add("linear", lambda x, w, b: _reduce(ops.linear(x, w, b)), _x(r, 2, 3), _x(r, 3, 4), _x(r, 4))
    add("sum_axis", lambda a: _reduce(ops.sum(a, axis=1)), _x(r, 2, 3, 4))
    add("sum_keepdims", lambda a: _reduce(ops.sum(a, axis=(0, 2), keepdims=True)), _x(r, 2, 3, 4))
    add("mean", lambda a: _reduce(ops.mean(a, axis=-1)), _x(r, 2, 3, 4))
    add("reshape", lambda a: _reduce(ops.reshape(a, (4, 6))), _x(r, 2, 3, 4))
    add("transpose", lambda a: _reduce(ops.transpose(a, (2, 0, 1))), _x(r, 2, 3, 4))
    add("swapaxes", lambda a: _reduce(ops.swapaxes(a, 0, 2)), _x(r, 2, 3, 4))
    add("getitem_basic", lambda a: _reduce(ops.getitem(a, (slice(None), 1, slice(0, 3)))), _x(r, 2, 3, 4))
    idx = np.array([0, 2, 2, 1])
    add("getitem_advanced", lambda a: _reduce(ops.getitem(a, idx)), _x(r, 3, 4))
    add("concat", lambda a, b: _reduce(ops.concat([a, b], axis=1)), _x(r, 2, 3), _x(r, 2, 2))
    add("stack", lambda a, b: _reduce(ops.stack([a, b], axis=1)), _x(r, 2, 3), _x(r, 2, 3))
    add("broadcast_to", lambda a: _reduce(ops.broadcast_to(a, (3, 2, 4))), _x(r, 2, 1))
    ids = np.array([[0, 3, 3], [2, 4, 0]])
    add("embedding", lambda t: _reduce(ops.embedding(t, ids)), _x(r, 5, 3))
    # with value == input the estimator's identity backward is the true gradient
    add("straight_through", lambda a: _reduce(ops.mul(ops.straight_through(a, a.data), a)), _x(r, 6))
    add("softmax", lambda a: _reduce(ops.softmax(a, axis=-1)), _x(r, 3, 5))
    add("log_softmax", lambda a: _reduce(ops.log_softmax(a, axis=0)), _x(r, 3, 5))
    tgt = r.integers(0, 6, (3, 4))
    wts = (r.random((3, 4)) < 0.7).astype(np.float64)
    wts[0, 0] = 1.0
    add("cross_entropy", lambda a: ops.cross_entropy(a, tgt), _x(r, 3, 4, 6))
    add("cross_entropy_weighted", lambda a: ops.cross_entropy(a, tgt, wts), _x(r, 3, 4, 6))
    add("cross_entropy_none", lambda a: _reduce(ops.cross_entropy(a, tgt, reduction="none")), _x(r, 3, 4, 6))
    add("layer_norm", lambda x, g, b: _reduce(ops.layer_norm(x, g, b)), _x(r, 3, 6), _x(r, 6), _x(r, 6))
    add("rms_norm", lambda x, g: _reduce(ops.rms_norm(x, g)), _x(r, 3, 6), _x(r, 6))
    add("gelu_tanh", lambda a: _reduce(ops.gelu(a)), _x(r, 7))
    add("gelu_erf", lambda a: _reduce(ops.gelu(a, approximate=False)), _x(r, 7))
    add("silu", lambda a: _reduce(ops.silu(a)), _x(r, 7))
    add("swiglu", lambda x, g, u, d: _reduce(ops.swiglu(x, g, u, d)),
        _x(r, 2, 4), _x(r, 4, 6), _x(r, 4, 6), _x(r, 6, 4))
    pos = np.arange(3, 8)
    add("rotary", lambda a: _reduce(ops.rotary_apply(a, pos)), _x(r, 2, 5, 6))
    add("attention", lambda q, k, v: _reduce(ops.attention(q, k, v)), _x(r, 2, 3, 4), _x(r, 2, 5, 4), _x(r, 2, 5, 4))
    add("attention_causal_qknorm", lambda q, k, v, gq, gk: _reduce(
        ops.attention(q, k, v, causal=True, qk_norm=True, q_gain=gq, k_gain=gk)),
        _x(r, 2, 4, 4), _x(r, 2, 4, 4), _x(r, 2, 4, 4), _x(r, 4), _x(r, 4))
    add("attention_offset", lambda q, k, v: _reduce(ops.attention(q, k, v, causal=True, key_offset=3)),
        _x(r, 1, 2, 4), _x(r, 1, 5, 4), _x(r, 1, 5, 4))
    add("conv2d", lambda x, w, b: _reduce(ops.conv2d(x, w, b, stride=2, padding=1)),
        _x(r, 2, 5, 5, 2), _x(r, 3, 3, 2, 3), _x(r, 3))
    add("conv2d_valid", lambda x, w: _reduce(ops.conv2d(x, w)), _x(r, 1, 4, 4, 3), _x(r, 2, 2, 3, 2))
    add("upsample_nearest", lambda a: _reduce(ops.upsample_nearest(a, 2)), _x(r, 1, 2, 3, 2))
    add("tensor_methods", lambda a: _reduce((a[:, 1:] * 2.0 - 1.0) / 3.0 + a.sum(axis=1, keepdims=True) ** 2),
        _x(r, 3, 4))
    return cases


def _tiny_block(objective: str, conditioning: str = "adaln_zero"):
    cfg = BackboneConfig(objective=objective, layers=1, hidden=16, heads=2, conditioning=conditioning,
                         vocab_size=11, latent_channels=3, cond_dim=8, seq_len=5)
    block = Block(cfg, RngStream(3)).astype(np.float64)
    rng = np.random.default_rng(5)
    for p in block.parameters().values():
        # adaLN-zero gates start at zero; randomize so every path carries gradient
        p.data = rng.standard_normal(p.shape) * 0.5
    return cfg, block


def block_case(objective: str, conditioning: str = "adaln_zero"):
    """A full transformer block of the given objective's family, with inputs and parameters."""
    cfg, block = _tiny_block(objective, conditioning)
    r = np.random.default_rng(6)
    x = Tensor(r.standard_normal((2, 5, 16)), dtype=np.float64)
    c = Tensor(r.standard_normal((2, 16)), dtype=np.float64)
    params = list(block.parameters().values())
    causal = objective == "next_token"

    def f(*_):
        return _reduce(block(x, c, causal))

    return f"block_{objective}_{conditioning}", f, [x, c] + params


def block_cases():
    return [block_case("next_token"), block_case("flow_matching"), block_case("masked_token"),
            block_case("next_token", "cross_attention"), block_case("flow_matching", "in_context")]
