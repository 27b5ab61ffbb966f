"""Encoder/decoder pairs wrapped with a latent regularizer."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import ops
from ..core.nn import Conv2d, Linear, Module, param
from ..core.rng import RngStream
from ..core.tensor import Tensor, no_grad
from .config import CodecConfig
from .quantizers import (
    fsq_ids_to_codes,
    fsq_normalized,
    fsq_quantize,
    kl_regularize,
    lfq_codes,
    lfq_quantize,
    vq_init_codebook,
    vq_quantize,
)


def to_unit(images: np.ndarray) -> np.ndarray:
    """uint8 ``[B, H, W, 3]`` to float32 in [-1, 1]."""
    return (np.asarray(images, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


class ConvEncoder(Module):
    """Stem conv, then one stride-2 conv per halving, GELU between, 1x1 projection out."""

    def __init__(self, cfg: CodecConfig, out_ch: int, rng: RngStream):
        widths = cfg.channels
        self.stem = Conv2d(3, widths[0], 3, rng)
        stages = int(math.log2(cfg.downsample))
        self.down = []
        c = widths[0]
        for i in range(stages):
            nxt = widths[min(i + 1, len(widths) - 1)]
            self.down.append(Conv2d(c, nxt, 3, rng, stride=2, padding=1))
            c = nxt
        self.out = Conv2d(c, out_ch, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = ops.gelu(self.stem(x))
        for conv in self.down:
            h = ops.gelu(conv(h))
        return self.out(h)


class ConvDecoder(Module):
    def __init__(self, cfg: CodecConfig, in_ch: int, rng: RngStream):
        widths = cfg.channels
        stages = int(math.log2(cfg.downsample))
        chans = [widths[min(i, len(widths) - 1)] for i in range(stages + 1)][::-1]
        self.inp = Conv2d(in_ch, chans[0], 3, rng)
        self.up = [Conv2d(chans[i], chans[i + 1], 3, rng) for i in range(stages)]
        self.out = Conv2d(chans[-1], 3, 3, rng)

    def forward(self, z: Tensor) -> Tensor:
        h = ops.gelu(self.inp(z))
        for conv in self.up:
            h = ops.gelu(conv(ops.upsample_nearest(h, 2)))
        return self.out(h)


class PatchEncoder(Module):
    """Per-patch MLP: each ``f x f`` patch maps to one latent vector."""

    def __init__(self, cfg: CodecConfig, out_ch: int, rng: RngStream):
        f = cfg.downsample
        self.f = f
        self.fc1 = Linear(3 * f * f, cfg.patch_hidden, rng, std=float(np.sqrt(1.0 / (3 * f * f))))
        self.fc2 = Linear(cfg.patch_hidden, out_ch, rng, std=float(np.sqrt(1.0 / cfg.patch_hidden)))

    def forward(self, x: Tensor) -> Tensor:
        B, H, W, C = x.shape
        f = self.f
        p = x.reshape(B, H // f, f, W // f, f, C).transpose(0, 1, 3, 2, 4, 5).reshape(B, H // f, W // f, f * f * C)
        return self.fc2(ops.gelu(self.fc1(p)))


class PatchDecoder(Module):
    def __init__(self, cfg: CodecConfig, in_ch: int, rng: RngStream):
        f = cfg.downsample
        self.f = f
        self.fc1 = Linear(in_ch, cfg.patch_hidden, rng, std=float(np.sqrt(1.0 / in_ch)))
        self.fc2 = Linear(cfg.patch_hidden, 3 * f * f, rng, std=float(np.sqrt(1.0 / cfg.patch_hidden)))

    def forward(self, z: Tensor) -> Tensor:
        B, h, w, _ = z.shape
        f = self.f
        p = self.fc2(ops.gelu(self.fc1(z)))
        return p.reshape(B, h, w, f, f, 3).transpose(0, 1, 3, 2, 4, 5).reshape(B, h * f, w * f, 3)


@dataclass
class CodecOutput:
    recon: Tensor
    aux: Tensor | None
    ids: np.ndarray | None  # [B, h, w] for discrete codecs
    latent: Tensor  # regularized latent grid fed to the decoder


class Autoencoder(Module):
    """Images are channels-last float arrays in [-1, 1]."""

    def __init__(self, cfg: CodecConfig, rng: RngStream | int = 0):
        if not isinstance(rng, RngStream):
            rng = RngStream(int(rng), stream_id=2)
        cfg.validate()
        self.cfg = cfg
        enc_out = 2 * cfg.code_dim if cfg.regularizer == "KL" else cfg.code_dim
        enc, dec = (ConvEncoder, ConvDecoder) if cfg.arch == "conv" else (PatchEncoder, PatchDecoder)
        self.encoder = enc(cfg, enc_out, rng)
        self.decoder = dec(cfg, cfg.code_dim, rng)
        if cfg.regularizer == "VQ":
            self.codebook = param(vq_init_codebook(cfg.vocab_size, cfg.code_dim, rng), no_decay=True)
        # scale that brings KL latents to unit variance for the diffusion backbone
        self.latent_scale = 1.0

    # -- pieces -------------------------------------------------------------
    def encode_raw(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        return self.encoder(x)

    def regularize(self, z_e: Tensor, rng: RngStream | None = None, sample: bool = True):
        cfg = self.cfg
        B, h, w, D = z_e.shape
        if cfg.regularizer == "none":
            return z_e, None, None
        if cfg.regularizer == "KL":
            mu = z_e[..., :cfg.code_dim]
            logvar = z_e[..., cfg.code_dim:]
            z, kl = kl_regularize(mu, logvar, rng, sample=sample and rng is not None)
            return z, kl, None
        flat = z_e.reshape(B * h * w, D)
        if cfg.regularizer == "VQ":
            q = vq_quantize(flat, self.codebook, cfg.vq_beta)
        elif cfg.regularizer == "LFQ":
            q = lfq_quantize(flat, cfg.vocab_size, cfg.lfq_commitment, cfg.lfq_entropy_weight,
                             cfg.lfq_inv_temperature)
        else:
            q = fsq_quantize(flat, cfg.fsq_levels)
        return q.z_q.reshape(B, h, w, D), q.aux, q.ids.reshape(B, h, w)

    def decode(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
        return self.decoder(z)

    def forward(self, x, rng: RngStream | None = None, sample: bool = True) -> CodecOutput:
        z, aux, ids = self.regularize(self.encode_raw(x), rng, sample)
        return CodecOutput(self.decode(z), aux, ids, z)

    def loss_weight(self) -> float:
        cfg = self.cfg
        if cfg.regularizer == "KL":
            return cfg.kl_weight
        if cfg.regularizer == "none":
            return 0.0
        return cfg.aux_weight

    # -- grid <-> sequence helpers -----------------------------------------
    def codes_from_ids(self, ids: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise IndexError(f"token ids must lie in [0, {cfg.vocab_size})")
        if cfg.regularizer == "VQ":
            return self.codebook.data[ids]
        if cfg.regularizer == "LFQ":
            return lfq_codes(ids, cfg.code_dim)
        return fsq_normalized(fsq_ids_to_codes(ids, cfg.fsq_levels), cfg.fsq_levels)

    def tokens(self, images_u8: np.ndarray) -> np.ndarray:
        """uint8 images to token sequences ``[B, s]`` in raster order."""
        with no_grad():
            out = self.forward(to_unit(images_u8), sample=False)
        return out.ids.reshape(out.ids.shape[0], -1)

    def images_from_tokens(self, ids: np.ndarray) -> np.ndarray:
        side = self.cfg.grid_side
        ids = np.asarray(ids).reshape(-1, side, side)
        with no_grad():
            return to_uint8(self.decode(self.codes_from_ids(ids)).data)

    def latents(self, images_u8: np.ndarray) -> np.ndarray:
        """uint8 images to scaled latent sequences ``[B, s, c]`` (posterior means for KL)."""
        with no_grad():
            out = self.forward(to_unit(images_u8), sample=False)
        z = out.latent.data
        return (z.reshape(z.shape[0], -1, z.shape[-1]) * self.latent_scale).astype(np.float32)

    def images_from_latents(self, z: np.ndarray) -> np.ndarray:
        side = self.cfg.grid_side
        z = np.asarray(z, dtype=np.float32).reshape(-1, side, side, self.cfg.code_dim) / self.latent_scale
        with no_grad():
            return to_uint8(self.decode(z).data)

    def encode_dataset(self, images_u8: np.ndarray, batch: int = 256) -> np.ndarray:
        fn = self.tokens if self.cfg.discrete else self.latents
        parts = [fn(images_u8[i:i + batch]) for i in range(0, len(images_u8), batch)]
        return np.concatenate(parts, axis=0)

    def decode_dataset(self, seqs: np.ndarray, batch: int = 256) -> np.ndarray:
        fn = self.images_from_tokens if self.cfg.discrete else self.images_from_latents
        parts = [fn(seqs[i:i + batch]) for i in range(0, len(seqs), batch)]
        return np.concatenate(parts, axis=0)
