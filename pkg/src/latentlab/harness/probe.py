"""Attribute probe, Frechet feature distance and conditioning consistency.

The probe is a per-cell MLP over the 4x4 grid of 8x8 cells. Each cell gets
content logits (empty or one of the 18 type/color pairs) and background
logits; the background prediction averages the background logits over
cells. Mean-pooled hidden units serve as the feature space for the Frechet
distance.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..core import ops
from ..core.nn import Linear, Module
from ..core.rng import RngStream
from ..core.serialize import load_arrays, save_arrays
from ..core.tensor import Tensor, no_grad
from ..errors import UsageError
from ..optim import AdamW
from .data import BACKGROUNDS, CELL, COLORS, GRID, MAX_SHAPES, N_CELLS, N_CONTENT, SHAPES, SyntheticDataset
from .data import decode_condition

PROBE_GATE = 0.95
FEATURE_DIM = 64
COV_EPS = 1e-6


class NumericalError(ArithmeticError):
    pass


def image_cells(images_u8: np.ndarray) -> np.ndarray:
    """uint8 ``[n, 32, 32, 3]`` to float32 cells ``[n, 16, 192]`` in [-1, 1]."""
    x = np.asarray(images_u8, dtype=np.float32) / 127.5 - 1.0
    n = x.shape[0]
    x = x.reshape(n, GRID, CELL, GRID, CELL, 3).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(n, N_CELLS, CELL * CELL * 3))


class Probe(Module):
    def __init__(self, rng: RngStream | int = 0, hidden: int = FEATURE_DIM):
        if not isinstance(rng, RngStream):
            rng = RngStream(int(rng), stream_id=30)
        d_in = CELL * CELL * 3
        self.fc1 = Linear(d_in, hidden, rng, std=float(np.sqrt(2.0 / d_in)))
        self.fc2 = Linear(hidden, N_CONTENT + len(BACKGROUNDS), rng, std=float(np.sqrt(1.0 / hidden)))
        self.accuracy: float | None = None

    def forward(self, cells: Tensor):
        h = ops.gelu(self.fc1(cells))
        out = self.fc2(h)
        content = out[..., :N_CONTENT]
        bg = ops.mean(out[..., N_CONTENT:], axis=1)
        return content, bg, h

    def predict(self, images_u8: np.ndarray, batch: int = 512):
        """(content logits ``[n, 16, 19]``, background logits ``[n, 4]``, features ``[n, 64]``)."""
        cs, bs, fs = [], [], []
        with no_grad():
            for i in range(0, len(images_u8), batch):
                c, b, h = self.forward(Tensor(image_cells(images_u8[i:i + batch])))
                cs.append(c.data)
                bs.append(b.data)
                fs.append(h.data.mean(axis=1))
        if not cs:
            return (np.zeros((0, N_CELLS, N_CONTENT)), np.zeros((0, len(BACKGROUNDS))),
                    np.zeros((0, FEATURE_DIM)))
        return np.concatenate(cs), np.concatenate(bs), np.concatenate(fs)

    def features(self, images_u8: np.ndarray) -> np.ndarray:
        return self.predict(images_u8)[2].astype(np.float64)


def probe_accuracy(probe: Probe, images_u8: np.ndarray, attrs) -> float:
    """Fraction of images whose background and all 16 cell contents are predicted exactly."""
    content, bg, _ = probe.predict(images_u8)
    ok = (content.argmax(-1) == attrs.content_grid()).all(axis=1) & (bg.argmax(-1) == attrs.background)
    return float(ok.mean())


def train_probe(seed: int = 0, steps: int = 1500, batch_size: int = 256, lr: float = 3e-3,
                noise_std: float = 0.1, n_eval: int = 2048) -> Probe:
    """Fit the probe on fresh synthetic draws; accuracy is measured on held-out images."""
    probe = Probe(RngStream(seed, stream_id=30))
    rng = RngStream(seed, stream_id=31)
    data = SyntheticDataset(seed=seed + 7919)
    opt = AdamW(probe.parameters(), betas=(0.9, 0.99), eps=1e-8, weight_decay=0.0)
    for step in range(1, steps + 1):
        images, _, attrs = data.sample(batch_size, rng)
        x = image_cells(images) + rng.normal((batch_size, N_CELLS, CELL * CELL * 3), std=noise_std)
        content, bg, _ = probe.forward(Tensor(x))
        loss = ops.cross_entropy(content, attrs.content_grid()) + ops.cross_entropy(bg, attrs.background)
        probe.zero_grad()
        loss.backward()
        opt.step(lr * min(1.0, step / 100) * (0.1 if step > 0.8 * steps else 1.0), step)
    images, _, attrs = data.sample(n_eval, RngStream(seed, stream_id=32))
    probe.accuracy = probe_accuracy(probe, images, attrs)
    return probe


def save_probe(probe: Probe, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = probe.parameters()
    names = list(params)
    save_arrays(path / "params.llt", [params[k].data for k in names])
    meta = {"params": names, "accuracy": probe.accuracy}
    (path / "probe.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_probe(path: str | Path) -> Probe:
    path = Path(path)
    meta = json.loads((path / "probe.json").read_text(encoding="utf-8"))
    probe = Probe(0)
    probe.load_state_dict(dict(zip(meta["params"], load_arrays(path / "params.llt"))))
    probe.accuracy = meta["accuracy"]
    return probe


# -- Frechet distance ---------------------------------------------------------

def gaussian_fit(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise ValueError(f"need at least 2 feature rows, got shape {f.shape}")
    return f.mean(axis=0), np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2, eps: float = COV_EPS) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`` with ``eps * I`` added to both covariances.

    Square roots of the covariances come from symmetric eigendecompositions
    with negative eigenvalues clamped at 0. ``Tr (S1 S2)^(1/2)`` equals the sum
    of singular values of ``S2^(1/2) S1^(1/2)``, which stays accurate when
    the covariances have eigenvalues near zero.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, dtype=np.float64)), np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    k = mu1.shape[0]
    s1 = np.asarray(sigma1, dtype=np.float64).reshape(k, k) + eps * np.eye(k)
    s2 = np.asarray(sigma2, dtype=np.float64).reshape(k, k) + eps * np.eye(k)
    for s in (s1, s2):
        w = np.linalg.eigvalsh(0.5 * (s + s.T))
        if not np.all(np.isfinite(w)) or w.min() < -1e-8 * max(1.0, abs(w).max()):
            raise NumericalError(f"covariance is not PSD after regularization (min eigenvalue {w.min():.3g})")
    covmean_trace = np.linalg.svd(_psd_sqrt(s2) @ _psd_sqrt(s1), compute_uv=False).sum()
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * covmean_trace)
    return max(value, 0.0)


def ffd_from_features(a: np.ndarray, b: np.ndarray) -> float:
    return frechet_distance(*gaussian_fit(a), *gaussian_fit(b))


def eval_ffd(samples_u8: np.ndarray, reference_u8: np.ndarray, probe: Probe) -> float:
    """Frechet distance between probe features of two image sets."""
    return ffd_from_features(probe.features(samples_u8), probe.features(reference_u8))


# -- conditioning consistency ---------------------------------------------------

def chance_level() -> float:
    """Expected score when images carry no information about the conditioning.

    Conditioned attributes are uniform and independent of the image, so each
    background/type/color comparison matches with probability one over its
    cardinality whatever the probe predicts.
    """
    nb, nt, nc = len(BACKGROUNDS), len(SHAPES), len(COLORS)
    ns = np.arange(1, MAX_SHAPES + 1)
    return float(np.mean((1.0 / nb + ns * (1.0 / nt + 1.0 / nc)) / (1 + 2 * ns)))


def attribute_matches(content_logits: np.ndarray, bg_logits: np.ndarray, cond: np.ndarray) -> np.ndarray:
    """Per-sample fraction of conditioned attributes the probe finds in the image.

    Attributes are the background plus, for each conditioned shape, its type
    and its color at the conditioned cell. Type and color are read from the
    marginals of the non-empty content classes at that cell.
    """
    target = decode_condition(cond)
    n = len(target)
    rows = np.arange(n)
    hits = (bg_logits.argmax(-1) == target.background).astype(np.float64)
    total = np.ones(n)
    nt, nc = len(SHAPES), len(COLORS)
    z = content_logits - content_logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    joint = p[..., 1:].reshape(n, N_CELLS, nt, nc)
    for k in range(MAX_SHAPES):
        sel = target.types[:, k] >= 0
        cell = np.where(sel, target.cells[:, k], 0)
        j = joint[rows, cell]
        hits += sel * (j.sum(axis=2).argmax(-1) == target.types[:, k])
        hits += sel * (j.sum(axis=1).argmax(-1) == target.colors[:, k])
        total += 2 * sel
    return hits / total


def cond_consistency_score(probe: Probe, images_u8: np.ndarray, cond: np.ndarray,
                           gate: float = PROBE_GATE) -> float:
    if probe.accuracy is None or probe.accuracy < gate:
        raise UsageError(f"probe accuracy {probe.accuracy} is below the {gate} gate; evaluation refused")
    if len(images_u8) == 0:
        raise ValueError("no images to score")
    content, bg, _ = probe.predict(images_u8)
    return float(attribute_matches(content, bg, cond).mean())


def eval_cond_consistency(model, sampler, probe: Probe, n: int, codec, seed: int = 0) -> float:
    """Sample ``n`` images for random attribute conditions and score them with the probe."""
    from ..backbone import ConditioningInput
    from ..samplers import generate

    if probe.accuracy is None or probe.accuracy < PROBE_GATE:
        raise UsageError(f"probe accuracy {probe.accuracy} is below the {PROBE_GATE} gate; evaluation refused")
    _, cond, _ = SyntheticDataset(seed).sample(n, RngStream(seed, stream_id=33))
    seqs = generate(model, ConditioningInput.of(cond), sampler, RngStream(seed, stream_id=34))
    return cond_consistency_score(probe, codec.decode_dataset(seqs), cond)
