"""Codec configuration."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

from ..errors import ConfigError

REGULARIZERS = ("KL", "VQ", "LFQ", "FSQ", "none")
DISCRETE = ("VQ", "LFQ", "FSQ")


@dataclass
class CodecConfig:
    downsample: int = 4
    latent_channels: int = 4
    regularizer: str = "LFQ"
    vocab_size: int = 16384
    fsq_levels: tuple = (8, 8, 16, 16)
    image_side: int = 32
    arch: str = "conv"  # conv | patch
    channels: tuple = (32, 64, 128)
    patch_hidden: int = 256
    kl_weight: float = 1e-6
    aux_weight: float = 1.0
    vq_beta: float = 0.25
    lfq_entropy_weight: float = 0.1
    lfq_commitment: float = 0.25
    lfq_inv_temperature: float = 100.0

    def __post_init__(self):
        self.fsq_levels = tuple(int(v) for v in self.fsq_levels)
        self.channels = tuple(int(v) for v in self.channels)
        self.validate()

    def validate(self):
        f = self.downsample
        if f < 1 or f & (f - 1):
            raise ConfigError(f"downsample factor must be a power of two, got {f}")
        if self.image_side < 1 or self.image_side % f:
            raise ConfigError(f"image side {self.image_side} not divisible by downsample {f}")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if self.arch not in ("conv", "patch"):
            raise ConfigError(f"arch must be conv|patch, got {self.arch!r}")
        if self.latent_channels < 1:
            raise ConfigError("latent_channels must be positive")
        if self.regularizer in DISCRETE and self.vocab_size < 1:
            raise ConfigError("discrete codecs need a positive vocab_size")
        if self.regularizer == "LFQ" and self.vocab_size & (self.vocab_size - 1):
            raise ConfigError(f"LFQ vocab_size must be a power of two, got {self.vocab_size}")
        if self.regularizer == "FSQ":
            if any(level < 2 for level in self.fsq_levels):
                raise ConfigError(f"FSQ levels must all be >= 2, got {self.fsq_levels}")
            if math.prod(self.fsq_levels) != self.vocab_size:
                raise ConfigError(f"FSQ levels {self.fsq_levels} give {math.prod(self.fsq_levels)} codes, "
                                  f"not vocab_size {self.vocab_size}")

    @property
    def discrete(self) -> bool:
        return self.regularizer in DISCRETE

    @property
    def grid_side(self) -> int:
        return self.image_side // self.downsample

    @property
    def seq_len(self) -> int:
        return self.grid_side ** 2

    @property
    def code_dim(self) -> int:
        """Channels of the quantized latent grid."""
        if self.regularizer == "LFQ":
            return int(math.log2(self.vocab_size))
        if self.regularizer == "FSQ":
            return len(self.fsq_levels)
        return self.latent_channels

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["fsq_levels"] = list(self.fsq_levels)
        data["channels"] = list(self.channels)
        return data

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "CodecConfig":
        return dataclasses.replace(self, **changes)
