"""Differentiable operations on :class:`~latentlab.core.tensor.Tensor`.

Each op computes its forward value with numpy and registers a backward rule
that maps the output gradient to one gradient per operand (``None`` for
operands that are constants).
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .tensor import (
    ShapeError,
    Tensor,
    active_flop_counter,
    check_finite,
)

NORM_EPS = 1e-5
ROTARY_BASE = 10000.0
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _t(b, a)
    b = _t(b)
    return _t(a, b), b


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = check_finite(a.data / b.data, "div")

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("only scalar exponents are supported")
    p = float(exponent)
    out = check_finite(a.data ** p, "power")

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._from_op(out, (a,), bw)


def square(a: Tensor) -> Tensor:
    return Tensor._from_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a: Tensor) -> Tensor:
    out = check_finite(np.exp(a.data), "exp")
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = check_finite(np.log(a.data), "log")
    return Tensor._from_op(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = check_finite(np.sqrt(a.data), "sqrt")
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,))


def cast(a: Tensor, dtype) -> Tensor:
    src = a.dtype
    return Tensor._from_op(a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)

    def bw(g):
        return _unbroadcast(np.where(mask, g, 0), a.shape), _unbroadcast(np.where(mask, 0, g), b.shape)

    return Tensor._from_op(np.where(mask, a.data, b.data).astype(a.dtype, copy=False), (a, b), bw)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)

    def bw(g):
        return (_unbroadcast(np.where(mask, 0, g), a.shape),)

    return Tensor._from_op(out, (a,), bw)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product ``a @ b`` with numpy broadcasting of batch dims."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    k = a.shape[-1]
    # [..., k] @ [k, n] runs as a single 2-D GEMM
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        # numpy's batched matmul leaves BLAS for non-contiguous operands
        out = np.ascontiguousarray(a.data) @ np.ascontiguousarray(b.data)
    counter = active_flop_counter()
    if counter is not None:
        counter.add(2 * out.size * k)

    def bw(g):
        if flat:
            g2 = g.reshape(-1, b.shape[1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb
        g = np.ascontiguousarray(g)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.ascontiguousarray(np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.ascontiguousarray(np.swapaxes(a.data, -1, -2)) @ g, b.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# -- reductions and shape ops -----------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    out = np.transpose(a.data, axes)
    return Tensor._from_op(out, (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    out = np.swapaxes(a.data, i, j)
    return Tensor._from_op(out, (a,), lambda g: (np.swapaxes(g, i, j),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        raise TypeError("index with numpy arrays, not tensors")
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(np.ascontiguousarray(out), (a,), bw)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_t(x) for x in tensors]
    out = np.concatenate([x.data for x in tensors], axis=axis)
    sizes = np.cumsum([x.shape[axis] for x in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._from_op(out, tuple(tensors), bw)


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_t(x) for x in tensors]
    out = np.stack([x.data for x in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(out, tuple(tensors), bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    return Tensor._from_op(np.ascontiguousarray(out), (a,), lambda g: (_unbroadcast(g, a.shape),))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return Tensor._from_op(out, (table,), bw)


def straight_through(x: Tensor, value: np.ndarray) -> Tensor:
    """Forward ``value``, backward as the identity to ``x``."""
    value = np.asarray(value, dtype=x.dtype)
    if value.shape != x.shape:
        raise ShapeError(f"straight-through value {value.shape} vs input {x.shape}")
    return Tensor._from_op(value.copy(), (x,), lambda g: (g,))


# -- softmax family ---------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None,
                  reduction: str = "mean") -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over positions with nonzero weight.

    ``weights`` (same shape as ``targets``) excludes positions with weight 0;
    the mean divides by the number of included positions.
    """
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    flat = logits.data.reshape(-1, V)
    tflat = targets.reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(z.shape[0]), tflat]
    w = np.ones_like(nll) if weights is None else np.asarray(weights, dtype=flat.dtype).reshape(-1)
    if reduction == "none":
        count = 1.0
    else:
        count = float(np.count_nonzero(w))
        if count == 0:
            raise ValueError("cross_entropy: every position is excluded")
    per_pos = (nll * w).astype(flat.dtype)
    if reduction == "none":
        out = per_pos.reshape(targets.shape)
    else:
        out = np.asarray(per_pos.sum() / count, dtype=flat.dtype)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(p.shape[0]), tflat] -= 1.0
        scale = (w / count) * (np.asarray(g).reshape(-1) if reduction == "none" else g)
        return ((p * scale[:, None]).astype(flat.dtype).reshape(logits.shape),)

    return Tensor._from_op(out, (logits,), bw)


# -- normalization ------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = NORM_EPS) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = [x] + [p for p in (gain, bias) if p is not None]

    def bw(g):
        dxhat = g * gain.data if gain is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return tuple(grads)

    return Tensor._from_op(out, tuple(parents), bw)


def rms_norm(x: Tensor, gain: Tensor | None = None, eps: float = NORM_EPS) -> Tensor:
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * inv
    out = xhat * gain.data if gain is not None else xhat
    parents = (x, gain) if gain is not None else (x,)

    def bw(g):
        dxhat = g * gain.data if gain is not None else g
        dx = inv * (dxhat - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain is not None:
            return dx, _unbroadcast(g * xhat, gain.shape)
        return (dx,)

    return Tensor._from_op(out, parents, bw)


def normalize(x: Tensor, kind: str, gain: Tensor | None = None, bias: Tensor | None = None) -> Tensor:
    if kind == "layer_norm":
        return layer_norm(x, gain, bias)
    if kind == "rms_norm":
        if bias is not None:
            raise ValueError("rms_norm takes no bias")
        return rms_norm(x, gain)
    raise ValueError(f"unknown norm kind {kind!r}")


# -- activations ------------------------------------------------------------

def gelu(x: Tensor, approximate: bool = True) -> Tensor:
    """GELU; tanh approximation by default, exact erf form otherwise."""
    a = x.data
    if approximate:
        a2 = a * a
        th = a2 * 0.044715
        th += 1.0
        th *= a
        th *= _SQRT_2_OVER_PI
        np.tanh(th, out=th)
        out = th + 1.0
        out *= a
        out *= 0.5

        def bw(g):
            # d/da = 0.5 (1 + th) + 0.5 a (1 - th^2) * sqrt(2/pi) (1 + 3 * 0.044715 a^2)
            d = a2 * (3 * 0.044715 * _SQRT_2_OVER_PI)
            d += _SQRT_2_OVER_PI
            s = th * th
            np.subtract(1.0, s, out=s)
            s *= a
            s *= d
            s += th
            s += 1.0
            s *= 0.5
            s *= g
            return (s,)
    else:
        from scipy.special import erf

        cdf = 0.5 * (1.0 + erf(a / math.sqrt(2.0)))
        out = a * cdf

        def bw(g):
            pdf = np.exp(-0.5 * a * a) / math.sqrt(2.0 * math.pi)
            return (g * (cdf + a * pdf),)

    return Tensor._from_op(out.astype(a.dtype, copy=False), (x,), bw)


def silu(x: Tensor) -> Tensor:
    a = x.data
    s = _sigmoid(a)
    out = a * s
    return Tensor._from_op(out, (x,), lambda g: (g * s * (1.0 + a * (1.0 - s)),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "gelu_erf":
        return gelu(x, approximate=False)
    if kind == "silu":
        return silu(x)
    raise ValueError(f"unknown activation {kind!r}")


def swiglu(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """``(silu(x W_gate) * (x W_up)) W_down`` with row-vector convention."""
    return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down)


def swiglu_hidden(d: int, multiple: int = 64) -> int:
    """Hidden width for a SwiGLU layer: 2/3 * 4d rounded up to ``multiple``."""
    h = int(2 * 4 * d / 3)
    return multiple * ((h + multiple - 1) // multiple)


# -- attention --------------------------------------------------------------

def rotary_angles(positions: np.ndarray, head_dim: int, base: float = ROTARY_BASE) -> np.ndarray:
    if head_dim % 2:
        raise ValueError(f"rotary embeddings need an even head dim, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def rotary_apply(x: Tensor, positions: np.ndarray, base: float = ROTARY_BASE) -> Tensor:
    """Rotate consecutive (even, odd) feature pairs by position-dependent angles.

    ``x`` has shape ``[..., s, head_dim]`` and ``positions`` length ``s``.
    """
    head_dim = x.shape[-1]
    ang = rotary_angles(positions, head_dim, base)
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)

    def rotate(a, sin_):
        ev, od = a[..., 0::2], a[..., 1::2]
        out = np.empty_like(a)
        out[..., 0::2] = ev * cos - od * sin_
        out[..., 1::2] = ev * sin_ + od * cos
        return out

    out = rotate(x.data, sin)
    return Tensor._from_op(out, (x,), lambda g: (rotate(g, -sin),))


def attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False, qk_norm: bool = False,
              q_gain: Tensor | None = None, k_gain: Tensor | None = None,
              key_offset: int = 0) -> Tensor:
    """Scaled dot-product attention over ``[..., heads, s, head_dim]`` tensors.

    With ``qk_norm`` queries and keys are RMS-normalized per head before the
    dot product. ``key_offset`` is the absolute position of query 0 relative to
    key 0 (used by incremental decoding).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    if qk_norm:
        q = rms_norm(q, q_gain)
        k = rms_norm(k, k_gain)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = mul(matmul(q, swapaxes(k, -1, -2)), scale)
    if causal:
        sq, sk = q.shape[-2], k.shape[-2]
        qi = np.arange(sq)[:, None] + key_offset
        kj = np.arange(sk)[None, :]
        mask = kj > qi
        if mask.any():
            scores = masked_fill(scores, mask, -np.inf)
    return matmul(softmax(scores, axis=-1), v)


# -- convolution ------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D convolution on channels-last input ``[B, H, W, C]``.

    ``weight`` has shape ``[kh, kw, C_in, C_out]``.
    """
    B, H, W, C = x.shape
    kh, kw, cin, cout = weight.shape
    if cin != C:
        raise ShapeError(f"conv2d input has {C} channels, weight expects {cin}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    Hp, Wp = xp.shape[1], xp.shape[2]
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :Ho, :Wo]  # [B, Ho, Wo, C, kh, kw]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * C)
    wmat = weight.data.reshape(kh * kw * C, cout)
    out = cols @ wmat
    counter = active_flop_counter()
    if counter is not None:
        counter.add(2 * out.size * cols.shape[1])
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, cout)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(B * Ho * Wo, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, Ho, Wo, kh, kw, C)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + H, padding:padding + W, :] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return Tensor._from_op(out, parents, bw)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of ``[B, H, W, C]``."""
    B, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bw(g):
        return (g.reshape(B, H, factor, W, factor, C).sum(axis=(2, 4)),)

    return Tensor._from_op(out, (x,), bw)
