"""Latent regularizers: Gaussian KL and the VQ / LFQ / FSQ quantizers.

Quantizers take ``z_e`` of shape ``[N, D]`` and return integer ids ``[N]``,
a straight-through quantized tensor and (where defined) an auxiliary loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import ops
from ..core.rng import RngStream
from ..core.tensor import Tensor
from ..errors import ConfigError


@dataclass
class Quantized:
    ids: np.ndarray | None
    z_q: Tensor
    aux: Tensor | None


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# -- KL ---------------------------------------------------------------------

def kl_regularize(mu: Tensor, logvar: Tensor, rng: RngStream | None = None, sample: bool = True):
    """Reparameterized sample ``mu + sigma * eps`` and ``0.5 * mean(mu^2 + sigma^2 - 1 - logvar)``."""
    if mu.shape != logvar.shape:
        raise ValueError(f"mu {mu.shape} and logvar {logvar.shape} differ in shape")
    var = ops.exp(logvar)
    kl = 0.5 * ops.mean(ops.square(mu) + var - 1.0 - logvar)
    if not sample:
        return mu, kl
    if rng is None:
        raise ValueError("sampling needs an RngStream")
    eps = rng.normal(mu.shape, dtype=mu.dtype)
    z = mu + ops.exp(0.5 * logvar) * eps
    return z, kl


# -- VQ ---------------------------------------------------------------------

def nearest_codes(z: np.ndarray, codebook: np.ndarray, chunk_elems: int = 1 << 22) -> np.ndarray:
    """Index of the nearest codebook row per input row; ties go to the lowest index.

    Distances are summed squared differences in 64-bit, evaluated in row
    chunks so memory stays bounded.
    """
    z = np.asarray(z, dtype=np.float64)
    e = np.asarray(codebook, dtype=np.float64)
    if e.shape[0] == 0:
        raise ConfigError("empty codebook")
    if z.shape[-1] != e.shape[1]:
        raise ValueError(f"code dim {z.shape[-1]} vs codebook dim {e.shape[1]}")
    rows = max(1, chunk_elems // max(1, e.size))
    out = np.empty(z.shape[0], dtype=np.int64)
    for i in range(0, z.shape[0], rows):
        d = ((z[i:i + rows, None, :] - e[None]) ** 2).sum(axis=-1)
        out[i:i + rows] = np.argmin(d, axis=1)
    return out


def vq_init_codebook(K: int, dim: int, rng: RngStream) -> np.ndarray:
    if K < 1:
        raise ConfigError("empty codebook")
    return rng.uniform(-1.0 / K, 1.0 / K, (K, dim), dtype=np.float32)


def vq_quantize(z_e: Tensor, codebook: Tensor, beta: float = 0.25) -> Quantized:
    """``aux = mean((sg(z_e) - e)^2) + beta * mean((z_e - sg(e))^2)``."""
    if codebook.shape[0] == 0:
        raise ConfigError("empty codebook")
    ids = nearest_codes(z_e.data, codebook.data)
    e = ops.embedding(codebook, ids)
    codebook_loss = ops.mean(ops.square(e - z_e.detach()))
    commit = ops.mean(ops.square(z_e - e.detach()))
    aux = codebook_loss + beta * commit
    z_q = ops.straight_through(z_e, e.data)
    return Quantized(ids, z_q, aux)


# -- LFQ --------------------------------------------------------------------

def lfq_ids(z: np.ndarray) -> np.ndarray:
    """Bit ``i`` is set when ``z[..., i] > 0``; zero counts as negative."""
    bits = (np.asarray(z) > 0).astype(np.int64)
    return (bits << np.arange(bits.shape[-1], dtype=np.int64)).sum(axis=-1)


def lfq_codes(ids: np.ndarray, dim: int) -> np.ndarray:
    """Sign pattern in {-1, +1} for each id."""
    bits = (np.asarray(ids, dtype=np.int64)[..., None] >> np.arange(dim, dtype=np.int64)) & 1
    return (2 * bits - 1).astype(np.float32)


def _binary_entropy(p: Tensor) -> Tensor:
    eps = 1e-7
    q = 1.0 - p
    return -(p * ops.log(p + eps) + q * ops.log(q + eps))


def lfq_quantize(z_e: Tensor, vocab_size: int, commitment: float = 0.25, entropy_weight: float = 0.1,
                 inv_temperature: float = 100.0) -> Quantized:
    """Sign quantization with a commitment term and a factorized entropy penalty.

    Each bit's soft assignment is ``sigmoid(4 * inv_temperature * z)`` (a
    softmax over the two codes ``-1, +1`` with logits
    ``-inv_temperature * (z - code)^2``). The penalty is the mean per-sample
    code entropy minus the entropy of the batch-averaged bit distribution,
    both summed over bits, in nats.
    """
    dim = z_e.shape[-1]
    if 2 ** dim != vocab_size:
        raise ConfigError(f"LFQ code dim {dim} does not match vocab {vocab_size} (need log2)")
    ids = lfq_ids(z_e.data)
    codes = lfq_codes(ids, dim).astype(z_e.dtype)
    z_q = ops.straight_through(z_e, codes)
    commit = ops.mean(ops.square(z_e - codes))
    p = ops.sigmoid(4.0 * inv_temperature * z_e)
    per_sample = ops.mean(ops.sum(_binary_entropy(p), axis=-1))
    batch = ops.sum(_binary_entropy(ops.mean(p, axis=0)))
    aux = commitment * commit + entropy_weight * (per_sample - batch)
    return Quantized(ids, z_q, aux)


# -- FSQ --------------------------------------------------------------------

def _fsq_half(levels) -> np.ndarray:
    return (np.asarray(levels, dtype=np.float64) - 1.0) / 2.0


def fsq_bound(z: np.ndarray, levels) -> np.ndarray:
    """``u = (L - 1) / 2 * tanh(z)`` per dimension."""
    return np.tanh(np.asarray(z, dtype=np.float64)) * _fsq_half(levels)


def fsq_levels_of(z: np.ndarray, levels) -> np.ndarray:
    """Integer level ``q_i in [0, L_i)`` per dimension.

    Odd ``L``: ``q = round(u) + (L-1)/2`` rounding half away from zero. Even
    ``L``: ``u + (L-1)/2`` sits on a half-integer grid, and ties resolve
    downward (``q = ceil(u + (L-1)/2 - 1/2)``), so zero input lands on
    ``floor((L-1)/2)``. With ``L = 2`` this is the sign rule with zero counted
    as negative.
    """
    L = np.asarray(levels, dtype=np.float64)
    half = _fsq_half(levels)
    u = fsq_bound(z, levels)
    q = np.where(L % 2 == 1, round_half_away(u) + half, np.ceil(u + half - 0.5))
    return np.clip(q, 0, L - 1).astype(np.int64)


def fsq_codes_to_ids(q: np.ndarray, levels) -> np.ndarray:
    """Mixed-radix id with dimension 0 least significant."""
    radix = np.concatenate([[1], np.cumprod(levels)[:-1]]).astype(np.int64)
    return (np.asarray(q, dtype=np.int64) * radix).sum(axis=-1)


def fsq_ids_to_codes(ids: np.ndarray, levels) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    radix = np.concatenate([[1], np.cumprod(levels)[:-1]]).astype(np.int64)
    return (ids[..., None] // radix) % np.asarray(levels, dtype=np.int64)


def fsq_normalized(q: np.ndarray, levels) -> np.ndarray:
    """Centered levels ``q - (L-1)/2`` scaled by ``(L-1)/2`` into [-1, 1]."""
    half = _fsq_half(levels)
    return ((np.asarray(q) - half) / half).astype(np.float32)


def fsq_quantize(z_e: Tensor, levels) -> Quantized:
    """Straight-through through rounding; the surrogate path is ``tanh``."""
    levels = tuple(int(v) for v in levels)
    if any(v < 2 for v in levels):
        raise ConfigError(f"FSQ levels must all be >= 2, got {levels}")
    if z_e.shape[-1] != len(levels):
        raise ConfigError(f"FSQ expects {len(levels)} dims, got {z_e.shape[-1]}")
    dt = z_e.dtype
    # with the rounding replaced by the identity, (q - half) / half is exactly tanh(z)
    smooth = ops.tanh(z_e)
    q = fsq_levels_of(z_e.data, levels)
    z_q = ops.straight_through(smooth, fsq_normalized(q, levels).astype(dt))
    return Quantized(fsq_codes_to_ids(q, levels), z_q, None)
