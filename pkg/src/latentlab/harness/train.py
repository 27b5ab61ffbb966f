"""Training loop for the generative backbones on pre-encoded synthetic data.

A run directory holds ``config.json`` (the full training config plus the
resolved backbone config), ``metrics.csv`` (one row per evaluation, appended
as training proceeds), ``checkpoints/NNNNNN.{raw,ema}`` and, when samples are
requested, ``samples/step_NNNNNN/*.ppm``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import configs
from ..accounting import forward_flops, training_flops
from ..backbone import Backbone, BackboneConfig, ConditioningInput, build
from ..backbone.config import OBJECTIVES
from ..codec import Autoencoder, load_codec, read_encoded, write_encoded
from ..core.rng import RngStream
from ..core.serialize import load_arrays, save_arrays
from ..core.tensor import NonFiniteError, no_grad
from ..errors import ConfigError, DivergenceError
from ..objectives import CFM_DELTA, cfm_loss, cond_dropout, mt_loss, nt_loss, objective_loss
from ..optim import AdamW, EmaState, LRSchedule, ema_update, swap_in
from ..samplers import SamplerConfig, generate
from .data import SyntheticDataset
from .images import write_ppm_batch

PEAK_LR = {"continuous": 1e-4, "discrete": 3e-3}
EVAL_BATCH = 64
PPM_PER_EVAL = 8
METRIC_COLUMNS = ("step", "train_loss", "train_loss_smooth", "eval_loss", "eval_loss_raw", "ffd", "ffd_raw",
                  "cond_consistency", "cond_consistency_raw", "flops", "wall_time")
# seconds elapsed is the only column allowed to differ between identical runs
NONDETERMINISTIC_COLUMNS = ("wall_time",)


@dataclass
class TrainConfig:
    objective: str = "next_token"
    size: str = "T"
    conditioning: str = "adaln_zero"
    codec: str | None = None  # codec checkpoint directory
    data: str | None = None  # pre-encoded training set
    eval_data: str | None = None  # pre-encoded held-out set
    steps: int = 10_000
    batch_size: int = 64
    lr_schedule: str = "constant"  # constant | cosine
    peak_lr: float | None = None  # None picks 1e-4 (flow matching) or 3e-3 (token objectives)
    lr_floor: float = 3e-5
    warmup_steps: int = 1000
    ema: bool = True
    ema_decay: float = 0.99
    ema_interval: int = 100
    cond_dropout: float = 0.10
    seed: int = 0
    eval_every: int = 500
    eval_size: int = 256
    dataset_size: int | None = None  # cap on distinct training items
    checkpoint_every: int | None = None
    sample_count: int = 0  # generated images per evaluation for ffd / cond_consistency
    sample_steps: int | None = None  # sampler step override for evaluation samples
    backbone: dict = field(default_factory=dict)  # extra BackboneConfig fields (layers, hidden, ...)

    def __post_init__(self):
        self.validate()

    @property
    def family(self) -> str:
        return "continuous" if self.objective == "flow_matching" else "discrete"

    @property
    def resolved_peak_lr(self) -> float:
        return PEAK_LR[self.family] if self.peak_lr is None else float(self.peak_lr)

    def schedule(self) -> LRSchedule:
        return LRSchedule(self.lr_schedule, self.resolved_peak_lr, self.lr_floor, self.warmup_steps, self.steps)

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1 or self.eval_size < 1:
            raise ConfigError("steps, batch_size, eval_every and eval_size must be positive")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ConfigError(f"cond_dropout must lie in [0, 1), got {self.cond_dropout}")
        if self.dataset_size is not None and self.dataset_size < 1:
            raise ConfigError("dataset_size must be positive")
        if self.sample_count < 0 or self.sample_count == 1:
            raise ConfigError("sample_count must be 0 or at least 2")
        if self.ema and self.ema_interval < 1:
            raise ConfigError("ema_interval must be >= 1")
        self.schedule()  # warmup <= steps, floor < peak for cosine

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return configs.to_dict(self)


def desk_recipe(steps: int, reference_steps: int = 250_000) -> dict:
    """Warmup and EMA interval shrunk by the ratio of ``steps`` to the reference run length."""
    ratio = steps / reference_steps
    return {"warmup_steps": max(1, round(1000 * ratio)), "ema_interval": max(1, round(100 * ratio))}


# -- data ---------------------------------------------------------------------

@dataclass
class EncodedData:
    seqs: np.ndarray  # [n, s] token ids or [n, s, c] latents
    cond: np.ndarray  # [n, cond_dim]
    manifest: dict

    def __len__(self):
        return len(self.seqs)

    def head(self, n: int) -> "EncodedData":
        return EncodedData(self.seqs[:n], self.cond[:n], dict(self.manifest, count=min(n, len(self))))

    def reference_images(self, n: int | None = None) -> np.ndarray:
        """Re-render the source images of the first ``n`` items."""
        m = self.manifest
        n = len(self) if n is None else n
        images, _, _ = SyntheticDataset(m["dataset_seed"]).block(m["dataset_start"], n)
        return images


EVAL_START = 1 << 40  # eval items come from a disjoint index range of the same stream


def encode_split(codec: Autoencoder, n: int, seed: int = 0, start: int = 0, batch: int = 1024) -> EncodedData:
    data = SyntheticDataset(seed)
    seqs, conds = [], []
    for i in range(start, start + n, batch):
        images, cond, _ = data.block(i, min(batch, start + n - i))
        seqs.append(codec.encode_dataset(images))
        conds.append(cond)
    cfg = codec.cfg
    manifest = {
        "kind": "tokens" if cfg.discrete else "latents", "count": n, "grid_side": cfg.grid_side,
        "seq_len": cfg.seq_len, "channels": cfg.code_dim, "vocab_size": cfg.vocab_size if cfg.discrete else None,
        "codec_hash": cfg.digest(), "latent_scale": codec.latent_scale, "dataset_seed": seed,
        "dataset_start": start,
    }
    return EncodedData(np.concatenate(seqs), np.concatenate(conds), manifest)


def save_encoded(data: EncodedData, path: str | Path, codec: Autoencoder) -> Path:
    extra = {k: data.manifest[k] for k in ("dataset_seed", "dataset_start") if k in data.manifest}
    return write_encoded(path, data.seqs, data.cond, codec, extra)


def load_encoded(path: str | Path) -> EncodedData:
    return EncodedData(*read_encoded(path))


def backbone_config(cfg: TrainConfig, manifest: dict) -> BackboneConfig:
    fields = {"objective": cfg.objective, "size": cfg.size, "conditioning": cfg.conditioning,
              "seq_len": int(manifest["seq_len"]), "cond_dim": 64}
    if cfg.family == "discrete":
        if manifest["kind"] != "tokens":
            raise ConfigError(f"{cfg.objective} needs a token dataset, got {manifest['kind']}")
        fields["vocab_size"] = int(manifest["vocab_size"])
    else:
        if manifest["kind"] != "latents":
            raise ConfigError(f"flow_matching needs a latent dataset, got {manifest['kind']}")
        fields["latent_channels"] = int(manifest["channels"])
    unknown = set(cfg.backbone) - {f.name for f in dataclasses.fields(BackboneConfig)}
    if unknown:
        raise ConfigError(f"unknown backbone keys: {sorted(unknown)}")
    fields.update(cfg.backbone)
    return BackboneConfig(**fields)


# -- evaluation -----------------------------------------------------------------

def eval_loss(model: Backbone, data: EncodedData, seed: int = 0) -> float:
    """Objective loss on a fixed held-out set with fixed masks / times / noise.

    Flow-matching times are stratified over ``[0, 1 - delta)`` so the
    estimate has low variance; masks and noise come from a stream keyed
    only by ``seed``, so repeated evaluations see identical randomness.
    """
    objective = model.cfg.objective
    rng = RngStream(seed, stream_id=40)
    n = len(data)
    total, weight = 0.0, 0.0
    with no_grad():
        for i in range(0, n, EVAL_BATCH):
            x = data.seqs[i:i + EVAL_BATCH]
            cond = ConditioningInput.of(data.cond[i:i + EVAL_BATCH])
            if objective == "next_token":
                out = nt_loss(model, x, cond)
                w = x.size
            elif objective == "masked_token":
                out = mt_loss(model, x, cond, rng)
                w = out.diagnostics["masked"]
            else:
                t = (np.arange(i, i + len(x)) + 0.5) / n * (1.0 - CFM_DELTA)
                eps = rng.normal(x.shape, dtype=np.float32)
                out = cfm_loss(model, x, cond, rng, t=t, eps=eps)
                w = len(x)
            total += out.value * w
            weight += w
    return total / weight


def sample_images(model: Backbone, codec: Autoencoder, cond: np.ndarray, seed: int = 0,
                  steps: int | None = None) -> np.ndarray:
    sampler = SamplerConfig.for_objective(model.cfg.objective, steps=steps, seed=seed)
    if model.cfg.objective == "next_token":
        sampler = sampler.replace(steps=None)
    seqs = generate(model, ConditioningInput.of(cond), sampler, RngStream(seed, stream_id=42))
    return codec.decode_dataset(seqs)


def _sample_metrics(model, codec, probe, eval_data: EncodedData, cfg: TrainConfig, reference_feats):
    from .probe import cond_consistency_score, ffd_from_features

    cond = eval_data.cond[:cfg.sample_count]
    images = sample_images(model, codec, cond, seed=cfg.seed, steps=cfg.sample_steps)
    ffd = ffd_from_features(probe.features(images), reference_feats)
    return ffd, cond_consistency_score(probe, images, cond), images


# -- the run --------------------------------------------------------------------

@dataclass
class RunResult:
    run_dir: Path
    records: list
    model: Backbone
    ema: EmaState | None
    backbone: BackboneConfig
    status: str = "ok"


def _write_json(path: Path, data: dict):
    path.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


class MetricsWriter:
    def __init__(self, path: Path):
        self.path = path
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(METRIC_COLUMNS)

    def append(self, record: dict):
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow([_fmt(record[c]) for c in METRIC_COLUMNS])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in rows]


def save_checkpoint(directory: Path, step: int, params: dict, ema: EmaState | None):
    directory.mkdir(parents=True, exist_ok=True)
    names = list(params)
    save_arrays(directory / f"{step:06d}.raw", [params[k].data for k in names])
    if ema is not None:
        save_arrays(directory / f"{step:06d}.ema", [ema.shadow[k] for k in names])


def train_run(config: TrainConfig, run_dir: str | Path, train_data: EncodedData | None = None,
              eval_data: EncodedData | None = None, codec: Autoencoder | None = None, probe=None,
              log=None, until=None) -> RunResult:
    """Train one backbone and log a MetricRecord row per evaluation (step 0 included).

    Evaluation uses EMA weights when EMA is on; the ``*_raw`` columns always
    hold the raw-weight values, so an EMA-off run with the same seed is
    reproduced exactly by those columns. Sample-based metrics need a codec, a
    probe and ``sample_count > 0``; otherwise they are NaN.

    ``until(records)`` is called after every evaluation; training stops early
    once it returns True.
    """
    cfg = config
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    train_data = train_data if train_data is not None else load_encoded(_required(cfg.data, "data"))
    if eval_data is None:
        eval_data = load_encoded(cfg.eval_data) if cfg.eval_data else train_data
    eval_data = eval_data.head(cfg.eval_size)
    if codec is None and cfg.codec:
        codec = load_codec(cfg.codec)
    bcfg = backbone_config(cfg, train_data.manifest)
    model = build(bcfg, RngStream(cfg.seed, stream_id=1))
    params = model.parameters()
    opt = AdamW(params)
    schedule = cfg.schedule()
    ema = EmaState.init(params, cfg.ema_decay, cfg.ema_interval) if cfg.ema else None
    forward = forward_flops(bcfg).total
    sample_metrics = cfg.sample_count > 0 and codec is not None and probe is not None
    reference_feats = probe.features(eval_data.reference_images(cfg.sample_count)) if sample_metrics else None

    _write_json(run_dir / "config.json", {
        "train": cfg.to_dict(), "backbone": configs.to_dict(bcfg), "params": list(params),
        "data_manifest": train_data.manifest, "forward_flops": forward,
        "substitutions": {"data": "procedural 32x32 shapes", "ffd": "probe-feature Frechet distance",
                          "cond_consistency": "probe attribute-match fraction"},
    })
    writer = MetricsWriter(run_dir / "metrics.csv")
    n_train = len(train_data) if cfg.dataset_size is None else min(cfg.dataset_size, len(train_data))
    data_rng = RngStream(cfg.seed, stream_id=3)
    obj_rng = RngStream(cfg.seed, stream_id=4)
    drop_rng = RngStream(cfg.seed, stream_id=5)
    records = []
    start = time.perf_counter()
    smooth, smooth_w = 0.0, 0.0
    last_loss = math.nan

    def evaluate(step):
        rec = {"step": step, "train_loss": last_loss,
               "train_loss_smooth": smooth / smooth_w if smooth_w else math.nan,
               "flops": training_flops(forward, step * cfg.batch_size)}
        rec["eval_loss_raw"] = eval_loss(model, eval_data, cfg.seed)
        rec["ffd_raw"] = rec["cond_consistency_raw"] = math.nan
        images = None
        if sample_metrics:
            rec["ffd_raw"], rec["cond_consistency_raw"], images = _sample_metrics(
                model, codec, probe, eval_data, cfg, reference_feats)
        if ema is not None:
            saved = swap_in(params, ema.shadow)
            try:
                rec["eval_loss"] = eval_loss(model, eval_data, cfg.seed)
                rec["ffd"] = rec["cond_consistency"] = math.nan
                if sample_metrics:
                    rec["ffd"], rec["cond_consistency"], images = _sample_metrics(
                        model, codec, probe, eval_data, cfg, reference_feats)
            finally:
                swap_in(params, saved)
        else:
            rec["eval_loss"], rec["ffd"], rec["cond_consistency"] = (
                rec["eval_loss_raw"], rec["ffd_raw"], rec["cond_consistency_raw"])
        if images is not None:
            write_ppm_batch(run_dir / "samples" / f"step_{step:06d}", images[:PPM_PER_EVAL])
        rec["wall_time"] = time.perf_counter() - start
        records.append(rec)
        writer.append(rec)
        if log:
            log(rec)

    step = 0
    try:
        evaluate(0)
        for step in range(1, cfg.steps + 1):
            idx = data_rng.integers(0, n_train, cfg.batch_size)
            cond = ConditioningInput.of(train_data.cond[idx])
            if cfg.cond_dropout:
                cond = cond_dropout(cond, drop_rng, cfg.cond_dropout)
            out = objective_loss(model, train_data.seqs[idx], cond, obj_rng)
            last_loss = out.value
            if not math.isfinite(last_loss):
                raise DivergenceError("training loss is not finite", step=step)
            model.zero_grad()
            out.loss.backward()
            opt.step(schedule(step), step)
            if ema is not None:
                ema_update(ema, params, step)
            smooth = 0.98 * smooth + 0.02 * last_loss
            smooth_w = 0.98 * smooth_w + 0.02
            if step % cfg.eval_every == 0 or step == cfg.steps:
                evaluate(step)
                if until is not None and until(records):
                    break
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(run_dir / "checkpoints", step, params, ema)
    except (DivergenceError, NonFiniteError, FloatingPointError) as exc:
        err_step = getattr(exc, "step", None) or step
        _write_json(run_dir / "status.json", {"status": "diverged", "step": err_step, "error": str(exc)})
        if isinstance(exc, DivergenceError):
            raise
        raise DivergenceError(str(exc), step=err_step) from exc
    if not cfg.checkpoint_every or step % cfg.checkpoint_every:
        save_checkpoint(run_dir / "checkpoints", step, params, ema)
    _write_json(run_dir / "status.json", {"status": "ok", "step": step})
    return RunResult(run_dir, records, model, ema, bcfg)


def _required(value, name):
    if not value:
        raise ConfigError(f"TrainConfig.{name} is required when no in-memory data is passed")
    return value


def load_run(run_dir: str | Path, weights: str = "ema", step: int | None = None):
    """(model with loaded weights, TrainConfig, config.json contents) for a finished run."""
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    cfg = configs.from_dict(TrainConfig, meta["train"])
    bcfg = configs.from_dict(BackboneConfig, meta["backbone"])
    ckpts = sorted((run_dir / "checkpoints").glob("*.raw"))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints in {run_dir}")
    step = int(ckpts[-1].stem) if step is None else step
    path = run_dir / "checkpoints" / f"{step:06d}.{weights}"
    if weights == "ema" and not path.exists():
        path = path.with_suffix(".raw")
    model = build(bcfg, RngStream(cfg.seed, stream_id=1))
    model.load_state_dict(dict(zip(meta["params"], load_arrays(path))))
    return model, cfg, meta
