"""Transformer configuration and closed-form parameter counts."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from ..core.ops import swiglu_hidden
from ..errors import ConfigError

# (layers, hidden, heads); T is a desk-scale addition, XL is defined but not trained here
SIZES = {
    "T": (4, 128, 4),
    "S": (12, 768, 12),
    "M": (24, 1024, 16),
    "L": (24, 1536, 16),
    "XL": (32, 2304, 32),
}

OBJECTIVES = ("next_token", "masked_token", "flow_matching")
CONDITIONING = ("adaln_zero", "in_context", "cross_attention")
TIME_FEATURES = 256

# reference values from the published compute table: (params in millions, forward TFLOPs at s=1024)
PUBLISHED_SIZES = {
    ("continuous", "S"): (131.13, 0.2133),
    ("continuous", "M"): (459.19, 0.7234),
    ("continuous", "L"): (1031.67, 1.5485),
    ("continuous", "XL"): (3083.69, 4.4901),
    ("discrete", "S"): (153.73, 0.2261),
    ("discrete", "M"): (494.56, 0.6631),
    ("discrete", "L"): (1072.14, 1.3421),
    ("discrete", "XL"): (3137.29, 3.7166),
}
PUBLISHED_BLOCK_FRACTION = {
    ("continuous", "S"): 0.972, ("continuous", "M"): 0.987,
    ("continuous", "L"): 0.988, ("continuous", "XL"): 0.992,
    ("discrete", "S"): 0.829, ("discrete", "M"): 0.929,
    ("discrete", "L"): 0.951, ("discrete", "XL"): 0.975,
}


@dataclass
class BackboneConfig:
    objective: str = "next_token"
    size: str = "T"
    layers: int | None = None
    hidden: int | None = None
    heads: int | None = None
    conditioning: str = "adaln_zero"
    positions: str | None = None  # rotary | learned
    ff: str | None = None  # swiglu_2_3_4 | gelu_4
    norm: str | None = None  # rms_norm | layer_norm
    bias: bool | None = None
    qk_norm: bool = True
    vocab_size: int = 16384
    latent_channels: int = 4
    cond_dim: int = 64
    seq_len: int = 64
    ff_multiple: int = 64

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.size not in SIZES and None in (self.layers, self.hidden, self.heads):
            raise ConfigError(f"unknown size {self.size!r}")
        n, d, h = SIZES.get(self.size, (None, None, None))
        self.layers = n if self.layers is None else self.layers
        self.hidden = d if self.hidden is None else self.hidden
        self.heads = h if self.heads is None else self.heads
        discrete = self.family == "discrete"
        if self.positions is None:
            self.positions = "rotary" if self.objective == "next_token" else "learned"
        if self.ff is None:
            self.ff = "swiglu_2_3_4" if discrete else "gelu_4"
        if self.norm is None:
            self.norm = "rms_norm" if discrete else "layer_norm"
        if self.bias is None:
            self.bias = not discrete
        self.validate()

    @property
    def family(self) -> str:
        return "continuous" if self.objective == "flow_matching" else "discrete"

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def ff_hidden(self) -> int:
        if self.ff == "gelu_4":
            return 4 * self.hidden
        return swiglu_hidden(self.hidden, self.ff_multiple)

    @property
    def n_positions(self) -> int:
        """Positions seen by the trunk (one extra for an in-context conditioning token)."""
        return self.seq_len + (1 if self.conditioning == "in_context" else 0)

    @property
    def out_dim(self) -> int:
        return self.vocab_size if self.family == "discrete" else self.latent_channels

    def validate(self):
        if self.conditioning not in CONDITIONING:
            raise ConfigError(f"conditioning must be one of {CONDITIONING}, got {self.conditioning!r}")
        if self.positions not in ("rotary", "learned"):
            raise ConfigError(f"positions must be rotary|learned, got {self.positions!r}")
        if self.ff not in ("swiglu_2_3_4", "gelu_4"):
            raise ConfigError(f"ff must be swiglu_2_3_4|gelu_4, got {self.ff!r}")
        if self.norm not in ("rms_norm", "layer_norm"):
            raise ConfigError(f"norm must be rms_norm|layer_norm, got {self.norm!r}")
        for key in ("layers", "hidden", "heads", "vocab_size", "latent_channels", "cond_dim", "seq_len"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.positions == "rotary" and self.head_dim % 2:
            raise ConfigError(f"rotary positions need an even head dim, got {self.head_dim}")

    def replace(self, **changes) -> "BackboneConfig":
        data = dataclasses.asdict(self)
        data.update(changes)
        return BackboneConfig(**data)


def published_analog(size: str, family: str, conditioning: str = "adaln_zero") -> BackboneConfig:
    """Configuration mirroring a published model: s=1024, 1280-d pooled text conditioning."""
    objective = "flow_matching" if family == "continuous" else "next_token"
    return BackboneConfig(objective=objective, size=size, conditioning=conditioning,
                          vocab_size=16384, latent_channels=4, cond_dim=1280, seq_len=1024)


def param_count(cfg: BackboneConfig) -> dict:
    """Exact parameter count of the layout built by :func:`latentlab.backbone.build`."""
    d, n, dh = cfg.hidden, cfg.layers, cfg.head_dim
    b = 1 if cfg.bias else 0
    norm_params = d if cfg.norm == "rms_norm" else 2 * d
    adaln = cfg.conditioning == "adaln_zero"

    attn = 3 * d * d + 3 * d * b + d * d + d * b + (2 * dh if cfg.qk_norm else 0)
    if cfg.ff == "gelu_4":
        ff = 2 * d * 4 * d + (4 * d + d) * b
    else:
        h = cfg.ff_hidden
        ff = 3 * d * h + (2 * h + d) * b
    block = attn + ff
    block += 6 * d * d + 6 * d if adaln else 2 * norm_params
    if cfg.conditioning == "cross_attention":
        block += 4 * d * d + 4 * d * b + (2 * dh if cfg.qk_norm else 0) + norm_params
    blocks = n * block

    if cfg.family == "discrete":
        embedding = (cfg.vocab_size + 1) * d
    else:
        embedding = cfg.latent_channels * d + d
    if cfg.positions == "learned":
        embedding += cfg.n_positions * d

    conditioning = cfg.cond_dim + cfg.cond_dim * d + d + d * d + d
    if cfg.family == "continuous":
        conditioning += TIME_FEATURES * d + d + d * d + d

    head = (2 * d * d + 2 * d) if adaln else norm_params
    head += d * cfg.out_dim + cfg.out_dim * b

    total = embedding + blocks + conditioning + head
    return {
        "total": total,
        "embedding": embedding,
        "blocks": blocks,
        "conditioning": conditioning,
        "head": head,
        "per_block": block,
        "block_fraction": blocks / total,
    }
