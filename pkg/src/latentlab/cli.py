"""``latentlab`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration error. Output goes
under ``--out`` (default: ``$LATENTLAB_OUT`` or ``./runs``), and every
command writes ``command.json`` recording its arguments.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, configs
from .errors import ConfigError, UsageError

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class CommandError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def out_root(args) -> Path:
    root = args.out or os.environ.get("LATENTLAB_OUT") or "runs"
    return Path(root)


def write_manifest(directory: Path, args, extra: dict | None = None):
    directory.mkdir(parents=True, exist_ok=True)
    data = {"command": args.command, "version": __version__,
            "args": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}}
    data.update(extra or {})
    (directory / "command.json").write_text(json.dumps(data, indent=2, sort_keys=True, default=str),
                                            encoding="utf-8")


def load_json_config(path: str | None, overrides: list[str]) -> dict:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return configs.apply_overrides(data, overrides or [])


def emit(text: str):
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# -- flops ------------------------------------------------------------------------

def cmd_flops(args) -> int:
    from .accounting import FlopsConvention, forward_flops, reports_to_csv, reports_to_json
    from .backbone import PUBLISHED_SIZES, BackboneConfig

    if args.seq < 1:
        raise ConfigError(f"--seq must be >= 1, got {args.seq}")
    objective = args.objective or ("flow_matching" if args.family == "continuous" else "next_token")
    cfg = BackboneConfig(objective=objective, size=args.size, conditioning=args.conditioning,
                         vocab_size=args.vocab, latent_channels=args.channels, cond_dim=args.cond_dim,
                         seq_len=args.seq)
    conv = FlopsConvention(mac_flops=args.mac_flops, attention_s2=not args.no_attention_s2,
                           elementwise_modulation=not args.no_modulation)
    report = forward_flops(cfg, conv=conv)
    ref = PUBLISHED_SIZES.get((cfg.family, args.size))
    result = report.to_dict()
    if ref is not None and args.seq == 1024:
        result["reference_tflops"] = ref[1]
        result["relative_deviation"] = report.tflops / ref[1] - 1.0
    if args.format == "csv":
        emit(reports_to_csv([report]))
    else:
        emit(json.dumps(result, indent=2, sort_keys=True))
    if args.format == "json" and "reference_tflops" in result:
        sys.stderr.write(f"forward {report.tflops:.4f} TFLOPs vs reference {ref[1]} "
                         f"({100 * result['relative_deviation']:+.1f}%)\n")
    if args.save:
        d = out_root(args)
        write_manifest(d, args)
        (d / "flops.json").write_text(reports_to_json([report]), encoding="utf-8")
        (d / "flops.csv").write_text(reports_to_csv([report]), encoding="utf-8")
    return EXIT_OK


# -- fit ----------------------------------------------------------------------------

def _read_points(path: str, xcol: str, ycol: str, group: str | None):
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path} has no rows")
    for c in (xcol, ycol) + ((group,) if group else ()):
        if c not in rows[0]:
            raise ConfigError(f"column {c!r} missing from {path}")
    groups: dict = {}
    for r in rows:
        x, y = float(r[xcol]), float(r[ycol])
        if x > 0 and np.isfinite(y):
            groups.setdefault(r[group] if group else "all", []).append((x, y))
    return groups


def cmd_fit(args) -> int:
    from .accounting import fit_power_law

    groups = _read_points(args.csv, args.x, args.y, args.group)
    fits = {}
    for name, pts in sorted(groups.items()):
        try:
            fits[name] = {**fit_power_law([p[0] for p in pts], [p[1] for p in pts]).to_dict()}
        except ValueError as exc:
            fits[name] = {"a": None, "b": None, "c": None, "n": len(pts), "error": str(exc)}
    text = json.dumps(fits, indent=2, sort_keys=True)
    emit(text)
    if args.save:
        d = out_root(args)
        write_manifest(d, args)
        (d / "fits.json").write_text(text, encoding="utf-8")
    return EXIT_OK


# -- plot ---------------------------------------------------------------------------

def cmd_plot(args) -> int:
    from .plot import plot_csv

    try:
        svg = plot_csv(args.csv, args.x, args.y, args.group, logx=args.logx, logy=args.logy,
                       title=args.title or "")
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    path = Path(args.svg) if args.svg else out_root(args) / (Path(args.csv).stem + f"_{args.y}.svg")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg, encoding="utf-8")
    emit(str(path))
    return EXIT_OK


# -- codec ----------------------------------------------------------------------------

def _codec_config(args):
    from .codec import CodecConfig

    data = load_json_config(args.config, args.set)
    cfg = configs.from_dict(CodecConfig, data)
    cfg.validate()
    return cfg


def cmd_codec_train(args) -> int:
    from .codec import save_codec, train_autoencoder
    from .harness.data import SyntheticDataset
    from .harness.train import EVAL_START, encode_split, save_encoded

    cfg = _codec_config(args)
    d = out_root(args)
    write_manifest(d, args, {"codec_config": cfg.to_dict()})
    data = SyntheticDataset(args.data_seed)
    images, _, _ = data.block(0, args.n_images)
    eval_images, _, _ = data.block(EVAL_START, args.n_eval)
    res = train_autoencoder(cfg, images, args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                            eval_images=eval_images, log=lambda r: sys.stderr.write(json.dumps(r) + "\n"))
    save_codec(res.codec, d / "codec")
    (d / "report.json").write_text(json.dumps({**res.report.to_dict(), "steps": res.steps_run}, indent=2,
                                              sort_keys=True), encoding="utf-8")
    if args.encode:
        save_encoded(encode_split(res.codec, args.encode, args.data_seed), d / "data" / "train", res.codec)
        save_encoded(encode_split(res.codec, args.n_eval, args.data_seed, start=EVAL_START),
                     d / "data" / "eval", res.codec)
    emit(json.dumps(res.report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_codec_bench(args) -> int:
    """Train one codec per regularizer under the same budget and report reconstruction metrics."""
    import csv
    import io

    from .codec import CodecConfig, train_autoencoder
    from .harness.data import SyntheticDataset
    from .harness.train import EVAL_START

    base = load_json_config(args.config, args.set)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise ConfigError("--methods is empty")
    data = SyntheticDataset(args.data_seed)
    images, _, _ = data.block(0, args.n_images)
    eval_images, _, _ = data.block(EVAL_START, args.n_eval)
    d = out_root(args)
    write_manifest(d, args)
    rows = []
    for m in methods:
        cfg = configs.from_dict(CodecConfig, {**base, "regularizer": m})
        cfg.validate()
        res = train_autoencoder(cfg, images, args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                                eval_images=eval_images)
        rows.append({"method": m, "vocab_size": cfg.vocab_size if cfg.discrete else "", **res.report.to_dict()})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["method", "vocab_size", "mse", "psnr", "codebook_utilization",
                                        "code_entropy"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    (d / "codec_bench.csv").write_text(buf.getvalue(), encoding="utf-8")
    emit(buf.getvalue())
    return EXIT_OK


# -- train / sample / eval ----------------------------------------------------------

def cmd_train(args) -> int:
    from .harness.probe import load_probe
    from .harness.train import TrainConfig, train_run

    cfg = configs.from_dict(TrainConfig, load_json_config(args.config, args.set))
    probe = load_probe(args.probe) if args.probe else None
    d = out_root(args)
    write_manifest(d, args)
    res = train_run(cfg, d, probe=probe, log=lambda r: sys.stderr.write(json.dumps(r) + "\n"))
    emit(json.dumps(res.records[-1], sort_keys=True))
    return EXIT_OK


def cmd_sample(args) -> int:
    from .backbone import ConditioningInput
    from .codec import load_codec
    from .core.rng import RngStream
    from .core.serialize import save_arrays
    from .harness.data import SyntheticDataset
    from .harness.images import write_ppm_batch
    from .harness.train import load_run
    from .samplers import SamplerConfig, generate

    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    model, cfg, meta = load_run(args.run, args.weights)
    objective = cfg.objective
    steps = args.steps
    if objective == "next_token" and steps is not None:
        warnings.warn("--steps has no effect for next-token sampling; ignored")
        sys.stderr.write("warning: --steps has no effect for next-token sampling; ignored\n")
        steps = None
    sampler = SamplerConfig.for_objective(objective, cfg_scale=args.cfg, steps=steps, top_p=args.top_p,
                                          temperature=args.temp, seed=args.seed)
    _, cond, _ = SyntheticDataset(args.seed).sample(args.n, RngStream(args.seed, stream_id=50))
    seqs = generate(model, ConditioningInput.of(cond), sampler, RngStream(args.seed, stream_id=51))
    d = out_root(args)
    write_manifest(d, args, {"sampler": configs.to_dict(sampler), "objective": objective})
    save_arrays(d / "sequences.llt", [np.asarray(seqs), cond])
    codec_path = args.codec or cfg.codec
    if not codec_path:
        raise ConfigError("no codec: pass --codec or train with TrainConfig.codec set")
    images = load_codec(codec_path).decode_dataset(seqs)
    paths = write_ppm_batch(d, images)
    emit(json.dumps({"images": len(paths), "sampler": configs.to_dict(sampler)}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .codec import load_codec
    from .harness.probe import load_probe
    from .harness.train import eval_loss, load_encoded, load_run, _sample_metrics

    model, cfg, meta = load_run(args.run, args.weights)
    data_path = args.data or cfg.eval_data or cfg.data
    if not data_path:
        raise ConfigError("no evaluation data: pass --data")
    data = load_encoded(data_path).head(args.n)
    result = {"eval_loss": eval_loss(model, data, cfg.seed)}
    if args.probe:
        codec = load_codec(args.codec or cfg.codec)
        probe = load_probe(args.probe)
        ecfg = cfg.replace(sample_count=min(args.n, len(data)), sample_steps=args.steps)
        ref = probe.features(data.reference_images(ecfg.sample_count))
        result["ffd"], result["cond_consistency"], _ = _sample_metrics(model, codec, probe, data, ecfg, ref)
    text = json.dumps(result, indent=2, sort_keys=True)
    d = out_root(args)
    write_manifest(d, args)
    (d / "eval.json").write_text(text, encoding="utf-8")
    emit(text)
    return EXIT_OK


# -- grid -------------------------------------------------------------------------------

def cmd_grid(args) -> int:
    from .harness.grid import load_grid_spec, run_experiment_grid, summarize

    try:
        spec = load_grid_spec(args.spec)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read grid spec {args.spec}: {exc}") from exc
    spec.configs()  # validates every cell before anything runs
    d = out_root(args)
    write_manifest(d, args, {"spec": configs.to_dict(spec)})
    res = run_experiment_grid(spec, d, jobs=args.jobs,
                              log=lambda name, status: sys.stderr.write(f"{name}: {status}\n"))
    fits = summarize(d, res.rows())
    summary = {"cells": len(res.cells), "failed": [c.name for c in res.failed], "fits": fits}
    emit(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return EXIT_RUNTIME if res.failed else EXIT_OK


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--out", default=None, help="output directory (default $LATENTLAB_OUT or ./runs)")
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=func)
        return sp

    sp = add("flops", cmd_flops, "forward FLOPs of a backbone configuration")
    sp.add_argument("--size", default="S")
    sp.add_argument("--family", choices=("continuous", "discrete"), default="continuous")
    sp.add_argument("--objective", default=None)
    sp.add_argument("--conditioning", default="adaln_zero")
    sp.add_argument("--seq", type=int, default=1024)
    sp.add_argument("--vocab", type=int, default=16384)
    sp.add_argument("--channels", type=int, default=4)
    sp.add_argument("--cond-dim", type=int, default=1280)
    sp.add_argument("--mac-flops", type=int, default=2)
    sp.add_argument("--no-attention-s2", action="store_true")
    sp.add_argument("--no-modulation", action="store_true", help="skip elementwise adaLN modulation terms")
    sp.add_argument("--format", choices=("json", "csv"), default="json")
    sp.add_argument("--save", action="store_true", help="also write flops.json / flops.csv under --out")

    sp = add("fit", cmd_fit, "power-law fit L = a C^-b + c from a CSV")
    sp.add_argument("csv")
    sp.add_argument("--x", default="flops")
    sp.add_argument("--y", default="eval_loss")
    sp.add_argument("--group", default=None)
    sp.add_argument("--save", action="store_true")

    sp = add("plot", cmd_plot, "SVG line plot from a CSV")
    sp.add_argument("csv")
    sp.add_argument("--x", default="flops")
    sp.add_argument("--y", default="eval_loss")
    sp.add_argument("--group", default=None)
    sp.add_argument("--logx", action="store_true")
    sp.add_argument("--logy", action="store_true")
    sp.add_argument("--title", default=None)
    sp.add_argument("--svg", default=None, help="output path")

    for name, func, help_ in (("codec-train", cmd_codec_train, "train an autoencoder and encode the dataset"),
                              ("codec-bench", cmd_codec_bench, "compare regularizers under one budget")):
        sp = add(name, func, help_)
        sp.add_argument("--config", default=None, help="CodecConfig JSON")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--steps", type=int, default=1500)
        sp.add_argument("--batch-size", type=int, default=32)
        sp.add_argument("--lr", type=float, default=2e-3)
        sp.add_argument("--n-images", type=int, default=4096)
        sp.add_argument("--n-eval", type=int, default=256)
        sp.add_argument("--data-seed", type=int, default=0)
        if name == "codec-train":
            sp.add_argument("--encode", type=int, default=0, help="encode this many training items")
        else:
            sp.add_argument("--methods", default="VQ,LFQ,FSQ")

    sp = add("train", cmd_train, "train a backbone")
    sp.add_argument("--config", default=None, help="TrainConfig JSON")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sp.add_argument("--probe", default=None)

    sp = add("sample", cmd_sample, "generate images from a run")
    sp.add_argument("run")
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--cfg", type=float, default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--top-p", type=float, default=None)
    sp.add_argument("--temp", type=float, default=None)
    sp.add_argument("--weights", choices=("ema", "raw"), default="ema")
    sp.add_argument("--codec", default=None)

    sp = add("eval", cmd_eval, "evaluate a run's final checkpoint")
    sp.add_argument("run")
    sp.add_argument("--data", default=None)
    sp.add_argument("--n", type=int, default=256)
    sp.add_argument("--probe", default=None)
    sp.add_argument("--codec", default=None)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--weights", choices=("ema", "raw"), default="ema")

    sp = add("grid", cmd_grid, "run an experiment grid")
    sp.add_argument("spec")
    sp.add_argument("--jobs", type=int, default=1)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, UsageError, CommandError) as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return getattr(exc, "code", EXIT_CONFIG)
    except (FileNotFoundError, KeyError, TypeError) as exc:
        sys.stderr.write(f"config error: {type(exc).__name__}: {exc}\n")
        return EXIT_CONFIG
    except Exception as exc:  # anything else is a runtime failure
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
