"""Generation under classifier-free guidance for the three objectives."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .backbone.model import Backbone, ConditioningInput, KVCache
from .core import ops
from .core.rng import RngStream
from .core.tensor import Tensor, no_grad
from .errors import ConfigError, DivergenceError
from .objectives import CFM_DELTA, gamma

# (cfg scale, steps) per objective; next-token steps are fixed by the sequence length
DEFAULTS = {
    "next_token": (8.0, None),
    "masked_token": (5.0, 10),
    "flow_matching": (5.0, 50),
}


@dataclass
class SamplerConfig:
    cfg_scale: float = 5.0
    steps: int | None = None
    top_p: float = 0.9
    temperature: float = 1.0
    seed: int = 0
    remask: str = "random"  # random | confidence
    delta: float = CFM_DELTA

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError(f"top_p must lie in (0, 1], got {self.top_p}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.steps is not None and self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.remask not in ("random", "confidence"):
            raise ConfigError(f"remask must be random|confidence, got {self.remask!r}")

    @classmethod
    def for_objective(cls, objective: str, **overrides) -> "SamplerConfig":
        scale, steps = DEFAULTS[objective]
        base = {"cfg_scale": scale, "steps": steps}
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)

    def replace(self, **changes) -> "SamplerConfig":
        return dataclasses.replace(self, **changes)


def cfg_combine(x_c, x_u, w: float):
    """Guided prediction ``(1 + w) x_c - w x_u``.

    Evaluated as ``x_c + w (x_c - x_u)`` so equal streams come back exactly.
    """
    x_c = np.asarray(x_c)
    x_u = np.asarray(x_u)
    if x_c.shape != x_u.shape:
        raise ValueError(f"guidance streams differ in shape: {x_c.shape} vs {x_u.shape}")
    if w == 0:
        return x_c.copy()
    return x_c + w * (x_c - x_u)


def nucleus_filter(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Zero everything outside the smallest top-probability prefix with mass >= ``top_p``, renormalized.

    Sorting is stable on descending probability, so equal probabilities keep
    the lower id first.
    """
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, axis=-1, kind="stable")
    sp = np.take_along_axis(probs, order, axis=-1)
    before = np.cumsum(sp, axis=-1) - sp
    keep_sorted = before < top_p
    keep_sorted[..., 0] = True
    keep = np.zeros_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=-1)
    out = np.where(keep, probs, 0.0)
    return out / out.sum(axis=-1, keepdims=True)


def nucleus_sample(logits, top_p: float, temperature: float, rng: RngStream) -> np.ndarray:
    """Sample one id per row of ``logits [..., V]``."""
    logits = np.asarray(logits, dtype=np.float64)
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    p = nucleus_filter(p, top_p)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(logits.shape[:-1])[..., None] * cdf[..., -1:]
    ids = (cdf <= u).sum(axis=-1)
    # never land on a filtered entry because of rounding at the top end
    last = p.shape[-1] - 1 - np.argmax((p > 0)[..., ::-1], axis=-1)
    return np.minimum(ids, last)


def _streams(cond: ConditioningInput, guided: bool):
    if guided:
        return [cond, cond.as_null()]
    return [cond]


# -- next token -------------------------------------------------------------

def sample_next_token_seq(model: Backbone, cond: ConditioningInput, sampler: SamplerConfig,
                          rng: RngStream | None = None, guided: bool = True) -> np.ndarray:
    """Left-to-right sampling with one KV cache per guidance stream."""
    if not model.causal:
        raise ConfigError("next-token sampling needs a causal model")
    rng = rng or RngStream(sampler.seed, stream_id=7)
    B, s = len(cond), model.cfg.seq_len
    streams = _streams(cond, guided)
    caches = [KVCache(model.cfg.layers) for _ in streams]
    out = np.zeros((B, s), dtype=np.int64)
    prev = np.full((B, 1), model.mask_id, dtype=np.int64)
    with no_grad():
        for i in range(s):
            logits = [model(prev, c, cache=cache).data[:, -1] for c, cache in zip(streams, caches)]
            guided_logits = cfg_combine(logits[0], logits[1], sampler.cfg_scale) if guided else logits[0]
            out[:, i] = nucleus_sample(guided_logits, sampler.top_p, sampler.temperature, rng)
            prev = out[:, i:i + 1]
    return out


# -- masked token -----------------------------------------------------------

def masked_schedule_counts(steps: int, s: int, mode: str = "cosine") -> list[int]:
    """Masked count entering each step, ``round(gamma(i / N) * s)``, followed by the final 0."""
    counts = [int(np.round(gamma(i / steps, mode) * s)) for i in range(steps)]
    return counts + [0]


def sample_masked(model: Backbone, cond: ConditioningInput, sampler: SamplerConfig,
                  rng: RngStream | None = None, guided: bool = True,
                  trajectory: list | None = None) -> np.ndarray:
    """Iterative parallel decoding from an all-[MASK] grid.

    Step ``i`` fills every masked position, then re-masks
    ``round(gamma((i+1)/N) * s)`` positions chosen uniformly at random (or the
    least confident ones with ``remask="confidence"``). The last step re-masks
    nothing. Pass a list as ``trajectory`` to record the masked count entering
    each step.
    """
    if model.causal:
        raise ConfigError("masked sampling needs a bidirectional model")
    rng = rng or RngStream(sampler.seed, stream_id=8)
    N = sampler.steps or DEFAULTS["masked_token"][1]
    B, s = len(cond), model.cfg.seq_len
    mid = model.mask_id
    z = np.full((B, s), mid, dtype=np.int64)
    conf = np.zeros((B, s))
    streams = _streams(cond, guided)
    with no_grad():
        for i in range(N):
            masked = z == mid
            if trajectory is not None:
                trajectory.append(int(masked.sum(axis=1).max()))
            logits = [model(z, c).data for c in streams]
            lg = cfg_combine(logits[0], logits[1], sampler.cfg_scale) if guided else logits[0]
            rows, cols = np.nonzero(masked)
            picked = lg[rows, cols]
            ids = nucleus_sample(picked, sampler.top_p, sampler.temperature, rng)
            z[rows, cols] = ids
            if sampler.remask == "confidence":
                p = ops.softmax(Tensor(picked.astype(np.float64) / sampler.temperature), axis=-1).data
                conf[rows, cols] = p[np.arange(len(ids)), ids]
            n_next = int(np.round(gamma((i + 1) / N) * s)) if i + 1 < N else 0
            if n_next:
                if sampler.remask == "random":
                    key = rng.random((B, s))
                else:
                    key = conf
                remask = np.argsort(key, axis=1, kind="stable")[:, :n_next]
                np.put_along_axis(z, remask, mid, axis=1)
    if trajectory is not None:
        trajectory.append(int((z == mid).sum(axis=1).max()))
    return z


# -- diffusion --------------------------------------------------------------

def velocity_from_noise(eps_hat, z, t, delta: float = CFM_DELTA):
    """Straight-path velocity ``(eps_hat - z) / (1 - t)`` with ``t`` clipped to ``1 - delta``."""
    t_eval = np.minimum(np.asarray(t, dtype=np.float64), 1.0 - delta)
    return (np.asarray(eps_hat) - np.asarray(z)) / (1.0 - t_eval)


def euler_integrate(eps_fn, z1: np.ndarray, steps: int, delta: float = CFM_DELTA) -> np.ndarray:
    """Integrate from t=1 to t=0 in ``steps`` uniform Euler steps.

    ``eps_fn(z, t)`` returns a noise estimate; it is queried at
    ``min(t, 1 - delta)``.
    """
    z = np.array(z1, dtype=np.float64)
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * dt
        t_eval = min(t, 1.0 - delta)
        eps = np.asarray(eps_fn(z, t_eval), dtype=np.float64)
        z = z - dt * (eps - z) / (1.0 - t_eval)
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"non-finite sampler state at step {k}", step=k)
    return z


def sample_diffusion(model: Backbone, cond: ConditioningInput, sampler: SamplerConfig,
                     latent_shape: tuple[int, ...] | None = None, rng: RngStream | None = None,
                     guided: bool = True, z1: np.ndarray | None = None) -> np.ndarray:
    rng = rng or RngStream(sampler.seed, stream_id=9)
    steps = sampler.steps or DEFAULTS["flow_matching"][1]
    B = len(cond)
    if latent_shape is None:
        latent_shape = (B, model.cfg.seq_len, model.cfg.latent_channels)
    if z1 is None:
        z1 = rng.normal(latent_shape, dtype=np.float64)
    streams = _streams(cond, guided)

    def eps_fn(z, t):
        x = z.astype(np.float32)
        preds = [model(x, c, t=np.full(B, t)).data for c in streams]
        return cfg_combine(preds[0], preds[1], sampler.cfg_scale) if guided else preds[0]

    with no_grad():
        return euler_integrate(eps_fn, z1, steps, sampler.delta).astype(np.float32)


def point_mass_eps(mu):
    """Exact noise posterior when all data sits at ``mu``: ``(z - (1 - t) mu) / t``."""
    mu = np.asarray(mu, dtype=np.float64)

    def fn(z, t):
        return (z - (1.0 - t) * mu) / t
    return fn


def gaussian_eps(mu, sigma: float):
    """Exact ``E[eps | z_t]`` for data ``N(mu, sigma^2 I)``; the flow maps ``z1`` to ``mu + sigma z1``."""
    mu = np.asarray(mu, dtype=np.float64)

    def fn(z, t):
        var = (1.0 - t) ** 2 * sigma ** 2 + t ** 2
        return t / var * (z - (1.0 - t) * mu)
    return fn


def generate(model: Backbone, cond: ConditioningInput, sampler: SamplerConfig,
             rng: RngStream | None = None) -> np.ndarray:
    objective = model.cfg.objective
    if objective == "next_token":
        return sample_next_token_seq(model, cond, sampler, rng)
    if objective == "masked_token":
        return sample_masked(model, cond, sampler, rng)
    return sample_diffusion(model, cond, sampler, rng=rng)


def inference_flops(model_or_cfg, sampler: SamplerConfig, include_cfg: bool = True) -> float:
    """Forward-FLOPs cost of producing one sample.

    Next-token decoding with a cache costs one forward over ``s`` tokens;
    iterative samplers pay one forward per step. Guidance doubles both.
    """
    from .accounting import forward_flops

    cfg = getattr(model_or_cfg, "cfg", model_or_cfg)
    forward = forward_flops(cfg).total
    if cfg.objective == "next_token":
        passes = 1
    else:
        passes = sampler.steps or DEFAULTS[cfg.objective][1]
    return (2 if include_cfg else 1) * passes * forward
