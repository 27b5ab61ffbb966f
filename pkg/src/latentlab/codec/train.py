"""Autoencoder training and reconstruction metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..core import ops
from ..core.rng import RngStream
from ..core.tensor import no_grad
from ..errors import DivergenceError
from ..optim import AdamW
from .config import CodecConfig
from .model import Autoencoder, to_unit

PSNR_CAP = 99.0


@dataclass
class ReconReport:
    """Pixel errors are measured on the [0, 1] intensity scale."""

    mse: float
    psnr: float
    codebook_utilization: float | None = None
    code_entropy: float | None = None

    def to_dict(self) -> dict:
        return {"mse": self.mse, "psnr": self.psnr, "codebook_utilization": self.codebook_utilization,
                "code_entropy": self.code_entropy}


def psnr(mse: float, max_val: float = 1.0) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_val ** 2 / mse))


def code_stats(ids: np.ndarray, vocab_size: int) -> tuple[float, float]:
    """(fraction of the vocabulary used, empirical entropy in bits)."""
    counts = np.bincount(np.asarray(ids, dtype=np.int64).ravel(), minlength=vocab_size)
    p = counts[counts > 0] / counts.sum()
    entropy = float(-(p * np.log2(p)).sum()) if len(p) > 1 else 0.0
    return float((counts > 0).sum() / vocab_size), entropy


def recon_report(images: np.ndarray, recon: np.ndarray, ids: np.ndarray | None = None,
                 vocab_size: int | None = None) -> ReconReport:
    """``images`` and ``recon`` in [0, 1] (or uint8, rescaled here)."""
    a = np.asarray(images, dtype=np.float64)
    b = np.asarray(recon, dtype=np.float64)
    if np.asarray(images).dtype == np.uint8:
        a = a / 255.0
    if np.asarray(recon).dtype == np.uint8:
        b = b / 255.0
    if a.size == 0:
        raise ValueError("evaluation set is empty")
    mse = float(np.mean((a - b) ** 2))
    util = ent = None
    if ids is not None:
        util, ent = code_stats(ids, vocab_size)
    return ReconReport(mse, psnr(mse), util, ent)


def codec_metrics(codec: Autoencoder, images_u8: np.ndarray, batch: int = 256) -> ReconReport:
    if len(images_u8) == 0:
        raise ValueError("evaluation set is empty")
    recons, ids = [], []
    with no_grad():
        for i in range(0, len(images_u8), batch):
            out = codec.forward(to_unit(images_u8[i:i + batch]), sample=False)
            recons.append((out.recon.data + 1.0) / 2.0)
            if out.ids is not None:
                ids.append(out.ids.ravel())
    recon = np.clip(np.concatenate(recons), 0.0, 1.0)
    all_ids = np.concatenate(ids) if ids else None
    return recon_report(images_u8, recon, all_ids, codec.cfg.vocab_size if ids else None)


@dataclass
class CodecTrainResult:
    codec: Autoencoder
    report: ReconReport
    history: list = field(default_factory=list)
    stopped_early: bool = False
    steps_run: int = 0


def train_autoencoder(cfg: CodecConfig, images_u8: np.ndarray, steps: int, batch_size: int = 32,
                      lr: float = 2e-3, seed: int = 0, eval_images: np.ndarray | None = None,
                      eval_every: int = 250, early_stop_mse: float | None = None,
                      log=None) -> CodecTrainResult:
    """Minimize reconstruction MSE (on the [-1, 1] scale) plus the weighted regularizer term.

    Evaluation MSE is on the [0, 1] scale. With ``early_stop_mse`` set,
    training halts at the first evaluation whose MSE is at or below it.
    """
    rng = RngStream(seed, stream_id=20)
    codec = Autoencoder(cfg, RngStream(seed, stream_id=2))
    params = codec.parameters()
    opt = AdamW(params, weight_decay=0.0, eps=1e-8, betas=(0.9, 0.99))
    eval_images = images_u8[:256] if eval_images is None else eval_images
    weight = codec.loss_weight()
    history = []
    stopped = False
    step = 0
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(images_u8), batch_size)
        x = to_unit(images_u8[idx])
        out = codec.forward(x, rng)
        loss = ops.mean(ops.square(out.recon - x))
        if out.aux is not None and weight:
            loss = loss + weight * out.aux
        if not np.isfinite(loss.item()):
            raise DivergenceError("autoencoder loss is not finite", step=step)
        codec.zero_grad()
        loss.backward()
        warm = min(1.0, step / max(1, min(100, steps // 10)))
        opt.step(lr * warm, step)
        if step % eval_every == 0 or step == steps:
            rep = codec_metrics(codec, eval_images)
            history.append({"step": step, "train_loss": loss.item(), **rep.to_dict()})
            if log:
                log(history[-1])
            if early_stop_mse is not None and rep.mse <= early_stop_mse:
                stopped = True
                break
    if cfg.regularizer == "KL":
        codec.latent_scale = latent_scale(codec, eval_images)
    report = codec_metrics(codec, eval_images)
    return CodecTrainResult(codec, report, history, stopped, step)


def latent_scale(codec: Autoencoder, images_u8: np.ndarray) -> float:
    """Reciprocal standard deviation of the posterior-mean latents."""
    saved = codec.latent_scale
    codec.latent_scale = 1.0
    z = codec.encode_dataset(images_u8)
    codec.latent_scale = saved
    std = float(z.std())
    return 1.0 / std if std > 0 else 1.0
