"""Training objectives: next-token NLL, masked-token NLL and flow matching."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone.model import Backbone, ConditioningInput
from .core import ops
from .core.rng import RngStream
from .core.tensor import Tensor
from .errors import UsageError

CFM_DELTA = 1e-3
MAX_MASK_TRIES = 100


@dataclass
class LossOutput:
    loss: Tensor
    per_position: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.loss.item()


# -- masking schedule ---------------------------------------------------------

def gamma(t, mode: str = "cosine"):
    """Mask probability at time ``t``.

    ``cosine`` is ``cos(pi t / 2)``: uniform ``t`` then gives mask ratios with
    the truncated-arccos density ``2 / (pi sqrt(1 - r^2))``. ``clamped_density``
    uses that density itself as a probability, clipped at 1.
    """
    t = np.asarray(t, dtype=np.float64)
    if mode == "cosine":
        # cos(pi/2) is 6e-17 in floating point; the schedule is exactly 0 there
        return np.where(t >= 1.0, 0.0, np.cos(0.5 * np.pi * t))
    if mode == "clamped_density":
        with np.errstate(divide="ignore"):
            return np.minimum(1.0, (2.0 / np.pi) / np.sqrt(np.maximum(1.0 - t * t, 0.0)))
    raise ValueError(f"unknown schedule mode {mode!r}")


def mask_ratio_cdf(r):
    """CDF of the mask ratio ``cos(pi t / 2)`` under ``t ~ U(0, 1)``."""
    r = np.clip(np.asarray(r, dtype=np.float64), 0.0, 1.0)
    return 1.0 - (2.0 / np.pi) * np.arccos(r)


@dataclass
class MaskTensor:
    mask: np.ndarray  # [B, s] bool, True = masked
    t: np.ndarray  # [B]

    @property
    def count(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def mt_mask_sample(tokens: np.ndarray, mask_id: int, rng: RngStream, t: np.ndarray | None = None,
                   mode: str = "cosine") -> tuple[np.ndarray, MaskTensor]:
    """Replace Bernoulli(gamma(t)) positions with ``mask_id``; rows with nothing masked are redrawn."""
    tokens = np.asarray(tokens)
    B, s = tokens.shape
    t_out = np.empty(B)
    mask = np.zeros((B, s), dtype=bool)
    todo = np.arange(B)
    fixed_t = None if t is None else np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    tries = 0
    while todo.size:
        tt = rng.random(todo.size) if fixed_t is None else fixed_t[todo]
        m = rng.random((todo.size, s)) < gamma(tt, mode)[:, None]
        t_out[todo] = tt
        mask[todo] = m
        redo = ~m.any(axis=1)
        tries += 1
        if fixed_t is not None and redo.any() and (tries >= MAX_MASK_TRIES
                                                   or np.all(gamma(fixed_t[todo[redo]], mode) == 0)):
            # t fixed where masking is impossible or vanishingly rare: draw fresh t for those rows
            fixed_t = fixed_t.copy()
            fixed_t[todo[redo]] = rng.random(int(redo.sum()))
        todo = todo[redo]
    z = np.where(mask, mask_id, tokens)
    return z, MaskTensor(mask, t_out)


# -- losses -----------------------------------------------------------------

def nt_inputs(tokens: np.ndarray, bos_id: int) -> np.ndarray:
    """Shift right and put BOS first: position i sees ``[BOS, z_1 .. z_{i-1}]``."""
    tokens = np.asarray(tokens)
    bos = np.full((tokens.shape[0], 1), bos_id, dtype=tokens.dtype)
    return np.concatenate([bos, tokens[:, :-1]], axis=1)


def nt_loss(model: Backbone, tokens: np.ndarray, cond: ConditioningInput) -> LossOutput:
    tokens = np.asarray(tokens)
    if tokens.shape[1] != model.cfg.seq_len:
        raise UsageError(f"sequence length {tokens.shape[1]} != model seq_len {model.cfg.seq_len}")
    logits = model(nt_inputs(tokens, model.mask_id), cond)
    loss = ops.cross_entropy(logits, tokens)
    per_pos = ops.cross_entropy(logits.detach(), tokens, reduction="none").data
    return LossOutput(loss, per_pos, {"positions": tokens.size})


def mt_loss(model: Backbone, tokens: np.ndarray, cond: ConditioningInput, rng: RngStream,
            t: np.ndarray | None = None, mode: str = "cosine") -> LossOutput:
    """NLL averaged over masked positions only."""
    tokens = np.asarray(tokens)
    if tokens.shape[1] != model.cfg.seq_len:
        raise UsageError(f"sequence length {tokens.shape[1]} != model seq_len {model.cfg.seq_len}")
    z, m = mt_mask_sample(tokens, model.mask_id, rng, t=t, mode=mode)
    logits = model(z, cond)
    w = m.mask.astype(np.float32)
    loss = ops.cross_entropy(logits, tokens, weights=w)
    per_pos = ops.cross_entropy(logits.detach(), tokens, weights=w, reduction="none").data
    return LossOutput(loss, per_pos, {"masked": int(m.mask.sum()), "mask_ratio": m.mask.mean(axis=1),
                                      "t": m.t})


def cfm_interpolate(x0, eps, t):
    """Straight path ``(1 - t) x0 + t eps``; ``t`` broadcasts over trailing dims."""
    x0 = np.asarray(x0)
    t = np.asarray(t, dtype=x0.dtype)
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (1.0 - t) * x0 + t * np.asarray(eps, dtype=x0.dtype)


def cfm_velocity_target(x0, eps):
    return np.asarray(eps) - np.asarray(x0)


def sample_cfm_time(rng: RngStream, n: int, delta: float = CFM_DELTA) -> np.ndarray:
    return rng.uniform(0.0, 1.0 - delta, n)


def cfm_loss(model: Backbone, x0: np.ndarray, cond: ConditioningInput, rng: RngStream,
             t: np.ndarray | None = None, eps: np.ndarray | None = None,
             delta: float = CFM_DELTA) -> LossOutput:
    """Noise-prediction loss weighted by ``1 / (1 - t)^2``, averaged over batch and elements."""
    x0 = np.asarray(x0, dtype=np.float32)
    B = x0.shape[0]
    if t is None:
        t = sample_cfm_time(rng, B, delta)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    if eps is None:
        eps = rng.normal(x0.shape)
    zt = cfm_interpolate(x0, eps, t.astype(np.float32))
    eps_hat = model(zt, cond, t=t)
    return cfm_loss_from_prediction(eps_hat, eps, t)


def cfm_loss_from_prediction(eps_hat: Tensor, eps: np.ndarray, t: np.ndarray) -> LossOutput:
    eps = np.asarray(eps, dtype=eps_hat.dtype)
    B = eps.shape[0]
    weight = (1.0 / (1.0 - np.asarray(t, dtype=np.float64)) ** 2).astype(eps_hat.dtype)
    wshape = (B,) + (1,) * (eps.ndim - 1)
    sq = ops.square(eps_hat - eps)
    loss = ops.mean(sq * weight.reshape(wshape))
    per_sample = sq.data.reshape(B, -1).mean(axis=1)
    return LossOutput(loss, per_sample * weight, {"unweighted_mse": float(per_sample.mean()), "t": t})


def cond_dropout(cond: ConditioningInput, rng: RngStream, p: float = 0.10) -> ConditioningInput:
    """Flag each row as null with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1], got {p}")
    drop = rng.random(len(cond)) < p
    return ConditioningInput(cond.cond_vector, cond.null_flag | drop)


def objective_loss(model: Backbone, batch: np.ndarray, cond: ConditioningInput, rng: RngStream,
                   **kwargs) -> LossOutput:
    objective = model.cfg.objective
    if objective == "next_token":
        return nt_loss(model, batch, cond)
    if objective == "masked_token":
        return mt_loss(model, batch, cond, rng, **kwargs)
    return cfm_loss(model, batch, cond, rng, **kwargs)


def markov_entropy_rate(initial: np.ndarray, transition: np.ndarray, length: int) -> float:
    """Mean per-position entropy (nats) of a Markov chain sequence of ``length`` tokens."""
    initial = np.asarray(initial, dtype=np.float64)
    P = np.asarray(transition, dtype=np.float64)
    row_h = -np.sum(np.where(P > 0, P * np.log(np.where(P > 0, P, 1.0)), 0.0), axis=1)
    dist = initial.copy()
    total = -np.sum(np.where(dist > 0, dist * np.log(np.where(dist > 0, dist, 1.0)), 0.0))
    for _ in range(length - 1):
        total += float(dist @ row_h)
        dist = dist @ P
    return total / length


def expected_mask_rate(mode: str = "cosine") -> float:
    """E_t[gamma(t)] for t ~ U(0, 1), by adaptive quadrature."""
    from scipy.integrate import quad

    if mode == "cosine":
        return quad(lambda t: math.cos(0.5 * math.pi * t), 0.0, 1.0)[0]
    knot = math.sqrt(1.0 - 4.0 / math.pi ** 2)
    a = quad(lambda t: (2.0 / math.pi) / math.sqrt(1.0 - t * t), 0.0, knot)[0]
    return a + (1.0 - knot)
