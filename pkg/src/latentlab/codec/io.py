"""Codec checkpoints and pre-encoded datasets.

A codec checkpoint is a directory holding ``params.llt`` (tensor blobs in the
order listed by the sidecar) and ``codec.json`` (config, parameter names,
latent scale). A pre-encoded dataset holds ``tokens.u16`` (raw little-endian
u16 ids) or ``latents.llt``, the conditioning vectors in ``cond.llt`` and a
``manifest.json``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..configs import from_dict
from ..core.serialize import load_arrays, save_arrays
from .config import CodecConfig
from .model import Autoencoder


def save_codec(codec: Autoencoder, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = codec.parameters()
    names = list(params)
    save_arrays(path / "params.llt", [params[k].data for k in names])
    meta = {"config": codec.cfg.to_dict(), "params": names, "latent_scale": codec.latent_scale,
            "digest": codec.cfg.digest()}
    (path / "codec.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_codec(path: str | Path) -> Autoencoder:
    path = Path(path)
    meta = json.loads((path / "codec.json").read_text(encoding="utf-8"))
    cfg = from_dict(CodecConfig, meta["config"])
    codec = Autoencoder(cfg, 0)
    arrays = load_arrays(path / "params.llt")
    codec.load_state_dict(dict(zip(meta["params"], arrays)))
    codec.latent_scale = float(meta["latent_scale"])
    return codec


def write_encoded(path: str | Path, seqs: np.ndarray, cond: np.ndarray, codec: Autoencoder,
                  extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg = codec.cfg
    if cfg.discrete:
        if cfg.vocab_size > 65536:
            raise ValueError("u16 token files hold at most 65536 ids")
        np.asarray(seqs, dtype="<u2").tofile(path / "tokens.u16")
        kind = "tokens"
    else:
        save_arrays(path / "latents.llt", [np.asarray(seqs, dtype=np.float32)])
        kind = "latents"
    save_arrays(path / "cond.llt", [np.asarray(cond, dtype=np.float32)])
    manifest = {
        "kind": kind,
        "count": int(len(seqs)),
        "grid_side": cfg.grid_side,
        "seq_len": cfg.seq_len,
        "channels": cfg.code_dim,
        "vocab_size": cfg.vocab_size if cfg.discrete else None,
        "codec_hash": cfg.digest(),
        "latent_scale": codec.latent_scale,
    }
    manifest.update(extra or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def read_encoded(path: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    if manifest["kind"] == "tokens":
        seqs = np.fromfile(path / "tokens.u16", dtype="<u2").astype(np.int64)
        seqs = seqs.reshape(manifest["count"], manifest["seq_len"])
    else:
        seqs = load_arrays(path / "latents.llt")[0]
    cond = load_arrays(path / "cond.llt")[0]
    return seqs, cond, manifest
