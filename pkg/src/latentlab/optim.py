"""AdamW, learning-rate schedules and weight EMA."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core.tensor import Tensor
from .errors import ConfigError, DivergenceError

BETAS = (0.9, 0.95)
EPS = 1e-15
WEIGHT_DECAY = 0.01


@dataclass
class LRSchedule:
    """Linear warmup from 0, then constant or cosine decay to ``floor`` at ``total_steps``."""

    kind: str = "constant"  # constant | cosine
    peak: float = 1e-4
    floor: float = 3e-5
    warmup: int = 1000
    total_steps: int = 250_000

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be constant|cosine, got {self.kind!r}")
        if self.warmup < 0 or self.warmup > self.total_steps:
            raise ConfigError(f"warmup {self.warmup} must lie in [0, total_steps={self.total_steps}]")
        if self.kind == "cosine" and not self.floor < self.peak:
            raise ConfigError(f"cosine floor {self.floor} must be below peak {self.peak}")

    def __call__(self, step: int) -> float:
        return lr_at_step(self, step)


def lr_at_step(schedule: LRSchedule, step: int) -> float:
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step < schedule.warmup:
        return schedule.peak * step / schedule.warmup
    if schedule.kind == "constant":
        return schedule.peak
    span = schedule.total_steps - schedule.warmup
    progress = 1.0 if span <= 0 else min(1.0, (step - schedule.warmup) / span)
    return schedule.floor + 0.5 * (schedule.peak - schedule.floor) * (1.0 + math.cos(math.pi * progress))


def decays(name: str, p: Tensor) -> bool:
    """Norm gains, biases, positional and embedding tables are excluded from weight decay."""
    return p.name != "no_decay" and p.ndim >= 2


class AdamW:
    """Decoupled weight decay applied before the moment update: ``theta *= 1 - lr * wd``."""

    def __init__(self, params: dict[str, Tensor], betas=BETAS, eps: float = EPS,
                 weight_decay: float = WEIGHT_DECAY):
        self.params = params
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.decay_mask = {k: decays(k, p) for k, p in params.items()}

    def step(self, lr: float, step: int | None = None):
        step = self.t + 1 if step is None else step
        for k, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient for {k}", step=step)
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.weight_decay and self.decay_mask[k]:
                p.data *= p.data.dtype.type(1.0 - lr * self.weight_decay)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            p.data -= (lr / c1) * m / denom

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


@dataclass
class EmaState:
    shadow: dict = field(default_factory=dict)
    decay: float = 0.99
    interval: int = 100
    updates: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor], decay: float = 0.99, interval: int = 100) -> "EmaState":
        if interval < 1:
            raise ConfigError(f"EMA interval must be >= 1, got {interval}")
        return cls({k: p.data.copy() for k, p in params.items()}, decay, interval, 0)


def ema_update(ema: EmaState, params: dict[str, Tensor], step: int) -> EmaState:
    """``shadow <- decay * shadow + (1 - decay) * params`` when ``step % interval == 0``.

    Entries already equal to the parameter are left untouched so constant
    weights give a bit-exact fixed point.
    """
    if step % ema.interval:
        return ema
    d = ema.decay
    for k, p in params.items():
        s = ema.shadow[k]
        new = d * s + (1.0 - d) * p.data
        ema.shadow[k] = np.where(s == p.data, p.data, new).astype(s.dtype)
    ema.updates += 1
    return ema


def swap_in(params: dict[str, Tensor], weights: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Load ``weights`` into ``params`` and return the previous values."""
    old = {k: p.data for k, p in params.items()}
    for k, p in params.items():
        p.data = weights[k].copy()
    return old
