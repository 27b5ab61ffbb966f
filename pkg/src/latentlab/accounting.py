"""Closed-form FLOPs accounting, power-law fits and Pareto frontiers.

Counting conventions (all switchable through :class:`FlopsConvention`):

* one multiply-accumulate is 2 FLOPs;
* the ``s^2`` attention score/mix term is included, unmasked even for causal models;
* adaLN modulation includes its elementwise shift/scale/gate work, ``2 * s * 6d`` per layer.

Lookups (token embeddings) and normalizations are free.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone.config import PUBLISHED_SIZES, TIME_FEATURES, BackboneConfig, published_analog, param_count

BACKWARD_FACTOR = 2  # backward pass costs twice the forward pass


@dataclass(frozen=True)
class FlopsConvention:
    mac_flops: int = 2
    attention_s2: bool = True
    elementwise_modulation: bool = True


BREAKDOWN_KEYS = ("attention_proj", "attention_mix", "feedforward", "conditioning", "embed_head")


@dataclass
class FlopsReport:
    objective: str
    size: str
    conditioning: str
    seq_len: int
    total: float
    breakdown: dict
    convention: FlopsConvention = field(default_factory=FlopsConvention)
    params: int = 0

    @property
    def tflops(self) -> float:
        return self.total / 1e12

    def training_flops(self, samples) -> float:
        return training_flops(self.total, samples)

    def to_dict(self) -> dict:
        out = {
            "objective": self.objective,
            "size": self.size,
            "conditioning": self.conditioning,
            "seq_len": self.seq_len,
            "forward_flops": self.total,
            "params": self.params,
        }
        out.update({f"flops_{k}": v for k, v in self.breakdown.items()})
        out.update({f"convention_{k}": v for k, v in asdict(self.convention).items()})
        return out


CSV_COLUMNS = ("objective", "size", "conditioning", "seq_len", "forward_flops", "params") + tuple(
    f"flops_{k}" for k in BREAKDOWN_KEYS) + (
    "convention_mac_flops", "convention_attention_s2", "convention_elementwise_modulation")


def trunk_flops(cfg: BackboneConfig, n: int, conv: FlopsConvention = FlopsConvention()) -> dict:
    """Attention and feed-forward work of all blocks over ``n`` positions."""
    d, L = cfg.hidden, cfg.layers
    m = conv.mac_flops / 2
    proj = 8 * n * d * d
    mix = 4 * n * n * d if conv.attention_s2 else 0
    ff_mult = 3 if cfg.ff == "swiglu_2_3_4" else 2
    ff = 2 * n * d * cfg.ff_hidden * ff_mult
    return {"attention_proj": m * L * proj, "attention_mix": m * L * mix, "feedforward": m * L * ff}


def forward_flops(cfg: BackboneConfig, s: int | None = None,
                  conv: FlopsConvention = FlopsConvention()) -> FlopsReport:
    """Forward FLOPs for one sample of ``s`` latent positions (default: ``cfg.seq_len``)."""
    s = cfg.seq_len if s is None else int(s)
    if s < 1:
        raise ValueError(f"sequence length must be positive, got {s}")
    d, L = cfg.hidden, cfg.layers
    m = conv.mac_flops / 2
    n = s + 1 if cfg.conditioning == "in_context" else s
    out = trunk_flops(cfg, n, conv)

    cond = 2 * cfg.cond_dim * d + 2 * d * d
    if cfg.family == "continuous":
        cond += 2 * TIME_FEATURES * d + 2 * d * d
    if cfg.conditioning == "adaln_zero":
        per_layer = 2 * d * 6 * d + (2 * s * 6 * d if conv.elementwise_modulation else 0)
        cond += L * per_layer + 2 * d * 2 * d + (2 * s * 2 * d if conv.elementwise_modulation else 0)
    elif cfg.conditioning == "cross_attention":
        # query and output projections over s, one key/value pair, single-key scores and mix
        per_layer = 2 * s * d * d + 4 * d * d + 2 * s * d * d
        if conv.attention_s2:
            per_layer += 4 * s * d
        cond += L * per_layer
    out["conditioning"] = m * cond

    head = 2 * s * d * cfg.out_dim
    if cfg.family == "continuous":
        head += 2 * s * cfg.latent_channels * d
    out["embed_head"] = m * head
    total = float(sum(out.values()))
    return FlopsReport(cfg.objective, cfg.size, cfg.conditioning, s, total,
                       {k: float(out[k]) for k in BREAKDOWN_KEYS}, conv, param_count(cfg)["total"])


def training_flops(forward: float, samples) -> float:
    """``(1 + 2) * forward * D``."""
    if np.any(np.asarray(samples) < 0):
        raise ValueError("sample count must be non-negative")
    return (1 + BACKWARD_FACTOR) * forward * samples


def published_comparison(size: str, family: str, conv: FlopsConvention = FlopsConvention()) -> dict:
    """Compare the analog of a published configuration with its reference row."""
    cfg = published_analog(size, family)
    rep = forward_flops(cfg, 1024, conv)
    ref_params, ref_tflops = PUBLISHED_SIZES[(family, size)]
    counts = param_count(cfg)
    return {
        "size": size,
        "family": family,
        "tflops": rep.tflops,
        "ref_tflops": ref_tflops,
        "tflops_rel_dev": rep.tflops / ref_tflops - 1.0,
        "params_m": counts["total"] / 1e6,
        "ref_params_m": ref_params,
        "params_rel_dev": counts["total"] / 1e6 / ref_params - 1.0,
        "block_fraction": counts["block_fraction"],
    }


def reports_to_csv(reports: list[FlopsReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.to_dict())
    return buf.getvalue()


def reports_to_json(reports: list[FlopsReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)


# -- scaling fits -----------------------------------------------------------

@dataclass
class ScalingFit:
    a: float
    b: float
    c: float
    rss: float
    r2: float
    n: int

    @property
    def ok(self) -> bool:
        return self.b > 0 and self.c >= 0

    def predict(self, C):
        return self.a * np.asarray(C, dtype=np.float64) ** (-self.b) + self.c

    def to_dict(self) -> dict:
        return asdict(self)


def _loglinear(logC: np.ndarray, excess: np.ndarray):
    y = np.log(excess)
    A = np.stack([np.ones_like(logC), -logC], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return coef, float(resid @ resid), y


def fit_power_law(C, L, grid: int = 400, tol: float = 1e-12) -> ScalingFit:
    """Fit ``L = a * C^-b + c``.

    For a trial floor ``c`` the pair ``(a, b)`` comes in closed form from
    linear regression of ``log(L - c)`` on ``log C``; the floor itself
    minimizes the squared relative residuals ``log L - log L_hat``. The floor
    lies in ``[0, min L)`` and is searched through the gap ``min L - c`` on a
    log scale, since floors sitting just under the smallest loss are common
    and a linear scan cannot resolve them: a coarse scan brackets the best
    gap and golden-section search refines it. ``r2`` is measured on
    ``log(L - c)``.
    """
    C = np.asarray(C, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if C.shape != L.shape or C.ndim != 1:
        raise ValueError("C and L must be 1-d arrays of equal length")
    if len(C) < 4:
        raise ValueError(f"need at least 4 points, got {len(C)}")
    if np.any(C <= 0):
        raise ValueError("compute values must be positive")
    if np.any(L <= 0):
        raise ValueError("losses must be positive")
    logC = np.log(C)
    hi = float(L.min())
    def obj(u):
        c = hi - math.exp(u)
        coef = _loglinear(logC, L - c)[0]
        pred = np.exp(coef[0] - coef[1] * logC) + c
        return float(((np.log(L) - np.log(pred)) ** 2).sum())

    us = np.linspace(math.log(hi * 1e-12), math.log(hi), grid + 1)
    vals = np.array([obj(u) for u in us])
    k = int(np.argmin(vals))
    lo_b, hi_b = us[max(k - 1, 0)], us[min(k + 1, grid)]
    g = (math.sqrt(5) - 1) / 2
    x1, x2 = hi_b - g * (hi_b - lo_b), lo_b + g * (hi_b - lo_b)
    f1, f2 = obj(x1), obj(x2)
    while hi_b - lo_b > tol:
        if f1 <= f2:
            hi_b, x2, f2 = x2, x1, f1
            x1 = hi_b - g * (hi_b - lo_b)
            f1 = obj(x1)
        else:
            lo_b, x1, f1 = x1, x2, f2
            x2 = lo_b + g * (hi_b - lo_b)
            f2 = obj(x2)
    u_best = min([(vals[k], us[k]), (f1, x1), (f2, x2)])[1]
    c_best = max(0.0, hi - math.exp(u_best))
    excess = L - c_best
    if np.any(excess <= 0):
        return ScalingFit(float("nan"), float("nan"), c_best, float("inf"), float("nan"), len(C))
    coef, rss, y = _loglinear(logC, excess)
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    return ScalingFit(float(np.exp(coef[0])), float(coef[1]), float(c_best), rss, r2, len(C))


def pareto_frontier(points, lower_is_better: bool = True) -> list[tuple[float, float]]:
    """Points not dominated in (compute, metric), sorted by compute.

    A point is dominated when another uses no more compute and scores no
    worse, with at least one of the two strictly better.
    """
    pts = [(float(c), float(m)) for c, m in points]
    sign = 1.0 if lower_is_better else -1.0
    order = sorted(range(len(pts)), key=lambda i: (pts[i][0], sign * pts[i][1]))
    frontier = []
    best = math.inf
    i = 0
    while i < len(order):
        # group equal compute so ties on both coordinates survive together
        j = i
        c0 = pts[order[i]][0]
        while j < len(order) and pts[order[j]][0] == c0:
            j += 1
        group = [pts[k] for k in order[i:j]]
        gbest = min(sign * m for _, m in group)
        if gbest < best:
            frontier.extend(p for p in group if sign * p[1] == gbest)
            best = gbest
        i = j
    return frontier

