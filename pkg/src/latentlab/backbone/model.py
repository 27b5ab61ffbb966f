"""Shared transformer backbone for the three generative objectives."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import ops
from ..core.nn import Embedding, Linear, Module, Norm, param
from ..core.rng import RngStream
from ..core.tensor import Tensor
from ..errors import UsageError
from .config import TIME_FEATURES, BackboneConfig


@dataclass
class ConditioningInput:
    """Batch of conditioning vectors; rows with ``null_flag`` use the learned null embedding."""

    cond_vector: np.ndarray  # [B, cond_dim]
    null_flag: np.ndarray  # [B] bool

    @classmethod
    def of(cls, vectors: np.ndarray, null: bool | np.ndarray = False) -> "ConditioningInput":
        vectors = np.asarray(vectors, dtype=np.float32)
        flags = np.broadcast_to(np.asarray(null, dtype=bool), (vectors.shape[0],)).copy()
        return cls(vectors, flags)

    def as_null(self) -> "ConditioningInput":
        return ConditioningInput(self.cond_vector, np.ones_like(self.null_flag))

    def __len__(self):
        return self.cond_vector.shape[0]

    @staticmethod
    def concat(parts: list["ConditioningInput"]) -> "ConditioningInput":
        return ConditioningInput(np.concatenate([p.cond_vector for p in parts]),
                                 np.concatenate([p.null_flag for p in parts]))


class KVCache:
    """Per-layer keys/values for incremental decoding."""

    def __init__(self, layers: int):
        self.keys: list[np.ndarray | None] = [None] * layers
        self.values: list[np.ndarray | None] = [None] * layers
        self.length = 0

    def extend(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer] = k, v
        else:
            self.keys[layer] = np.concatenate([self.keys[layer], k], axis=-2)
            self.values[layer] = np.concatenate([self.values[layer], v], axis=-2)
        return self.keys[layer], self.values[layer]


def timestep_features(t: np.ndarray, dim: int = TIME_FEATURES) -> np.ndarray:
    """Sinusoidal features of ``1000 * t`` (cos half then sin half)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(np.float32)


class MLPEmbedder(Module):
    def __init__(self, d_in: int, d: int, rng: RngStream):
        self.fc1 = Linear(d_in, d, rng)
        self.fc2 = Linear(d, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.silu(self.fc1(x)))


class SelfAttention(Module):
    def __init__(self, cfg: BackboneConfig, rng: RngStream):
        d = cfg.hidden
        self.heads = cfg.heads
        self.qk_norm = cfg.qk_norm
        self.rotary = cfg.positions == "rotary"
        self.qkv = Linear(d, 3 * d, rng, bias=cfg.bias)
        self.out = Linear(d, d, rng, bias=cfg.bias)
        if cfg.qk_norm:
            self.q_gain = param(np.ones(cfg.head_dim, np.float32), no_decay=True)
            self.k_gain = param(np.ones(cfg.head_dim, np.float32), no_decay=True)

    def forward(self, x: Tensor, causal: bool, offset: int = 0, cache: KVCache | None = None,
                layer: int = 0) -> Tensor:
        B, s, d = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(B, s, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        if self.qk_norm:
            q = ops.rms_norm(q, self.q_gain)
            k = ops.rms_norm(k, self.k_gain)
        if self.rotary:
            pos = np.arange(offset, offset + s)
            q = ops.rotary_apply(q, pos)
            k = ops.rotary_apply(k, pos)
        if cache is not None:
            kd, vd = cache.extend(layer, k.data, v.data)
            k, v = Tensor(kd), Tensor(vd)
        y = ops.attention(q, k, v, causal=causal, key_offset=offset if cache is not None else 0)
        y = y.transpose(0, 2, 1, 3).reshape(B, s, d)
        return self.out(y)


class CrossAttention(Module):
    """Attention from the sequence to a single key/value built from the conditioning vector."""

    def __init__(self, cfg: BackboneConfig, rng: RngStream):
        d = cfg.hidden
        self.heads = cfg.heads
        self.qk_norm = cfg.qk_norm
        self.q = Linear(d, d, rng, bias=cfg.bias)
        self.kv = Linear(d, 2 * d, rng, bias=cfg.bias)
        self.out = Linear(d, d, rng, bias=cfg.bias)
        if cfg.qk_norm:
            self.q_gain = param(np.ones(cfg.head_dim, np.float32), no_decay=True)
            self.k_gain = param(np.ones(cfg.head_dim, np.float32), no_decay=True)

    def forward(self, x: Tensor, c: Tensor) -> Tensor:
        B, s, d = x.shape
        h = self.heads
        q = self.q(x).reshape(B, s, h, d // h).transpose(0, 2, 1, 3)
        kv = self.kv(c).reshape(B, 1, 2, h, d // h).transpose(2, 0, 3, 1, 4)
        y = ops.attention(q, kv[0], kv[1], qk_norm=self.qk_norm,
                          q_gain=getattr(self, "q_gain", None), k_gain=getattr(self, "k_gain", None))
        return self.out(y.transpose(0, 2, 1, 3).reshape(B, s, d))


class FeedForward(Module):
    def __init__(self, cfg: BackboneConfig, rng: RngStream):
        d, hdim = cfg.hidden, cfg.ff_hidden
        self.kind = cfg.ff
        if self.kind == "gelu_4":
            self.fc1 = Linear(d, hdim, rng, bias=cfg.bias)
            self.fc2 = Linear(hdim, d, rng, bias=cfg.bias)
        else:
            self.gate = Linear(d, hdim, rng, bias=cfg.bias)
            self.up = Linear(d, hdim, rng, bias=cfg.bias)
            self.down = Linear(hdim, d, rng, bias=cfg.bias)

    def forward(self, x: Tensor) -> Tensor:
        if self.kind == "gelu_4":
            return self.fc2(ops.gelu(self.fc1(x)))
        return self.down(ops.silu(self.gate(x)) * self.up(x))


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1.0 + scale) + shift


class Block(Module):
    def __init__(self, cfg: BackboneConfig, rng: RngStream):
        d = cfg.hidden
        self.mode = cfg.conditioning
        adaln = self.mode == "adaln_zero"
        self.norm1 = Norm(d, cfg.norm, affine=not adaln)
        self.attn = SelfAttention(cfg, rng)
        if self.mode == "cross_attention":
            self.norm_x = Norm(d, cfg.norm)
            self.xattn = CrossAttention(cfg, rng)
        self.norm2 = Norm(d, cfg.norm, affine=not adaln)
        self.ff = FeedForward(cfg, rng)
        if adaln:
            self.modulation = Linear(d, 6 * d, rng, zero=True)

    def adaln_params(self, c: Tensor) -> list[Tensor]:
        """(shift, scale, gate) for the attention branch then the feed-forward branch."""
        mod = self.modulation(ops.silu(c))
        B, d6 = mod.shape
        d = d6 // 6
        mod = mod.reshape(B, 1, 6, d)
        return [mod[:, :, i, :] for i in range(6)]

    def forward(self, x: Tensor, c: Tensor, causal: bool, offset: int = 0,
                cache: KVCache | None = None, layer: int = 0) -> Tensor:
        if self.mode == "adaln_zero":
            sa, ca, ga, sf, cf, gf = self.adaln_params(c)
            x = x + ga * self.attn(modulate(self.norm1(x), sa, ca), causal, offset, cache, layer)
            return x + gf * self.ff(modulate(self.norm2(x), sf, cf))
        x = x + self.attn(self.norm1(x), causal, offset, cache, layer)
        if self.mode == "cross_attention":
            x = x + self.xattn(self.norm_x(x), c)
        return x + self.ff(self.norm2(x))


class Backbone(Module):
    """Token or latent transformer.

    Discrete inputs are integer grids ``[B, s]`` (id ``vocab_size`` is the
    [MASK] / BOS row). Continuous inputs are latents ``[B, s, channels]`` and
    require a time ``t``. Output: logits ``[B, s, vocab]`` or a noise estimate
    with the latent's shape.
    """

    def __init__(self, cfg: BackboneConfig, rng: RngStream):
        cfg.validate()
        self.cfg = cfg
        d = cfg.hidden
        if cfg.family == "discrete":
            self.tok_emb = Embedding(cfg.vocab_size + 1, d, rng)
        else:
            self.patch_in = Linear(cfg.latent_channels, d, rng)
        if cfg.positions == "learned":
            self.pos_emb = param(rng.truncated_normal((cfg.n_positions, d)), no_decay=True)
        self.null_cond = param(rng.truncated_normal((cfg.cond_dim,)), no_decay=True)
        self.cond_embed = MLPEmbedder(cfg.cond_dim, d, rng)
        if cfg.family == "continuous":
            self.time_embed = MLPEmbedder(TIME_FEATURES, d, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.layers)]
        adaln = cfg.conditioning == "adaln_zero"
        self.norm_f = Norm(d, cfg.norm, affine=not adaln)
        if adaln:
            self.final_modulation = Linear(d, 2 * d, rng, zero=True)
        self.head = Linear(d, cfg.out_dim, rng, bias=cfg.bias, zero=True)

    @property
    def causal(self) -> bool:
        return self.cfg.objective == "next_token"

    @property
    def mask_id(self) -> int:
        return self.cfg.vocab_size

    def cond_embedding(self, cond: ConditioningInput, t: np.ndarray | None = None) -> Tensor:
        vec = ops.where(np.asarray(cond.null_flag)[:, None], self.null_cond.reshape(1, -1),
                        Tensor(cond.cond_vector))
        c = self.cond_embed(vec)
        if self.cfg.family == "continuous":
            c = c + self.time_embed(Tensor(timestep_features(t)))
        return c

    def embed(self, x, offset: int = 0) -> Tensor:
        cfg = self.cfg
        if cfg.family == "discrete":
            ids = np.asarray(x)
            if ids.ndim != 2:
                raise UsageError(f"token input must be [batch, seq], got shape {ids.shape}")
            if ids.size and (ids.min() < 0 or ids.max() > cfg.vocab_size):
                raise IndexError(f"token ids must lie in [0, {cfg.vocab_size}]")
            return self.tok_emb(ids)
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if x.ndim != 3 or x.shape[-1] != cfg.latent_channels:
            raise UsageError(f"latent input must be [batch, seq, {cfg.latent_channels}], got {x.shape}")
        return self.patch_in(x)

    def forward(self, x, cond: ConditioningInput, t=None, cache: KVCache | None = None,
                return_hidden: bool = False) -> Tensor:
        cfg = self.cfg
        if cfg.family == "continuous":
            if t is None:
                raise UsageError("continuous backbone needs a time t")
            t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(cond),))
        elif t is not None:
            raise UsageError("discrete backbone takes no time t")
        offset = cache.length if cache is not None else 0
        h = self.embed(x)
        B, n = h.shape[0], h.shape[1]
        if len(cond) != B:
            raise UsageError(f"conditioning batch {len(cond)} vs input batch {B}")
        c = self.cond_embedding(cond, t)
        prepend = cfg.conditioning == "in_context" and offset == 0
        if prepend:
            h = ops.concat([c.reshape(B, 1, cfg.hidden), h], axis=1)
        n_total = h.shape[1]
        if offset + n_total > cfg.n_positions:
            raise UsageError(f"sequence of {offset + n_total} positions exceeds {cfg.n_positions}")
        if cfg.positions == "learned":
            h = h + self.pos_emb[offset:offset + n_total]
        for i, block in enumerate(self.blocks):
            h = block(h, c, self.causal, offset, cache, i)
        if cache is not None:
            cache.length += n_total
        if prepend:
            h = h[:, 1:]
        if return_hidden:
            return h
        if cfg.conditioning == "adaln_zero":
            mod = self.final_modulation(ops.silu(c)).reshape(B, 1, 2, cfg.hidden)
            y = modulate(self.norm_f(h), mod[:, :, 0, :], mod[:, :, 1, :])
        else:
            y = self.norm_f(h)
        return self.head(y)


def build(cfg: BackboneConfig, rng: RngStream | int) -> Backbone:
    if not isinstance(rng, RngStream):
        rng = RngStream(int(rng), stream_id=1)
    return Backbone(cfg, rng)
