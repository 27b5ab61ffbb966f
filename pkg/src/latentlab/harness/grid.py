"""Experiment grids: cartesian products of TrainConfig overrides, run one directory per cell.

Cells that differ only in the ``ema`` flag share a training trajectory: EMA
keeps a shadow copy of the weights and never feeds back into training, so
the EMA-off cell's log is exactly the raw-weight columns of the EMA-on run.
With ``share_ema`` the grid trains once and writes both directories.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
import shutil
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import configs
from ..accounting import fit_power_law, pareto_frontier
from ..codec import Autoencoder, load_codec
from ..errors import ConfigError
from .train import METRIC_COLUMNS, EncodedData, TrainConfig, load_encoded, read_metrics, train_run

CONFIG_COLUMNS = ("cell", "objective", "size", "conditioning", "lr_schedule", "ema", "dataset_size", "seed")
FRONTIER_COLUMNS = ("objective", "flops", "eval_loss", "cell", "step")
ABLATION_COLUMNS = ("objective", "lr_schedule", "ema", "seeds", "train_loss", "eval_loss", "ffd",
                    "cond_consistency", "ffd_std")


@dataclass
class GridSpec:
    base: dict = field(default_factory=dict)  # TrainConfig fields shared by every cell
    axes: dict = field(default_factory=dict)  # field -> list of values, crossed in insertion order
    cells: list = field(default_factory=list)  # explicit override dicts, used instead of ``axes``
    data: dict = field(default_factory=dict)  # family -> {"data", "eval_data", "codec"} paths
    probe: str | None = None
    name: str = "grid"

    def expand(self) -> list[dict]:
        if self.cells:
            overrides = [dict(c) for c in self.cells]
        elif self.axes:
            keys = list(self.axes)
            for k in keys:
                if not isinstance(self.axes[k], list) or not self.axes[k]:
                    raise ConfigError(f"grid axis {k!r} must be a non-empty list")
            overrides = [dict(zip(keys, vals)) for vals in itertools.product(*(self.axes[k] for k in keys))]
        else:
            overrides = []
        if not overrides:
            raise ConfigError("grid spec has no cells")
        return overrides

    def configs(self) -> list[TrainConfig]:
        return [configs.from_dict(TrainConfig, {**self.base, **o}) for o in self.expand()]


def load_grid_spec(path: str | Path) -> GridSpec:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return configs.from_dict(GridSpec, data)


@dataclass
class DataBundle:
    train: EncodedData
    eval: EncodedData
    codec: Autoencoder | None = None


def load_bundles(paths: dict) -> dict[str, DataBundle]:
    out = {}
    for family, p in paths.items():
        train = load_encoded(p["data"])
        out[family] = DataBundle(train, load_encoded(p.get("eval_data") or p["data"]),
                                 load_codec(p["codec"]) if p.get("codec") else None)
    return out


@dataclass
class CellResult:
    name: str
    config: TrainConfig
    status: str
    records: list
    error: str | None = None


@dataclass
class GridResult:
    out_dir: Path
    cells: list

    @property
    def failed(self) -> list:
        return [c for c in self.cells if c.status != "ok"]

    def rows(self) -> list[dict]:
        return grid_rows(self.cells)


def _run_cell(cfg: TrainConfig, run_dir: Path, bundle: DataBundle, probe):
    try:
        res = train_run(cfg, run_dir, bundle.train, bundle.eval, bundle.codec, probe)
        return "ok", res.records, None
    except Exception as exc:  # a failing cell must not stop the grid
        return "failed", read_metrics(run_dir / "metrics.csv") if (run_dir / "metrics.csv").exists() else [], \
            f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"


RAW_SWAP = {"eval_loss": "eval_loss_raw", "ffd": "ffd_raw", "cond_consistency": "cond_consistency_raw"}


def derive_ema_off(records: list[dict]) -> list[dict]:
    """Metric log of the EMA-off twin, read from the raw-weight columns."""
    out = []
    for r in records:
        r = dict(r)
        for k, raw in RAW_SWAP.items():
            r[k] = r[raw]
        out.append(r)
    return out


def _write_derived(src: Path, dst: Path, cfg: TrainConfig, records: list[dict], twin: str):
    from .train import MetricsWriter

    dst.mkdir(parents=True, exist_ok=True)
    meta = json.loads((src / "config.json").read_text(encoding="utf-8"))
    meta["train"] = cfg.to_dict()
    meta["shared_trajectory_with"] = twin
    (dst / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8")
    writer = MetricsWriter(dst / "metrics.csv")
    for r in records:
        writer.append(r)
    ckpt = dst / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    for f in sorted((src / "checkpoints").glob("*.raw")):
        shutil.copyfile(f, ckpt / f.name)
    if (src / "status.json").exists():
        shutil.copyfile(src / "status.json", dst / "status.json")


def _ema_key(cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    d.pop("ema")
    return json.dumps(d, sort_keys=True)


def run_experiment_grid(spec: GridSpec, out_dir: str | Path, bundles: dict[str, DataBundle] | None = None,
                        probe=None, jobs: int = 1, share_ema: bool = True, log=None) -> GridResult:
    """Run every cell into ``out_dir/cell_NNN`` and write ``grid.csv``.

    ``bundles`` maps ``"discrete"`` / ``"continuous"`` to data; when omitted
    the grid's ``data`` paths are loaded. Failed cells are recorded and the
    grid continues.
    """
    out_dir = Path(out_dir)
    cfgs = spec.configs()
    if bundles is None:
        bundles = load_bundles(spec.data)
    if probe is None and spec.probe:
        from .probe import load_probe
        probe = load_probe(spec.probe)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [f"cell_{i:03d}" for i in range(len(cfgs))]
    for name, cfg in zip(names, cfgs):
        (out_dir / name).mkdir(exist_ok=True)
        (out_dir / name / "cell.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True),
                                                  encoding="utf-8")

    # cells whose config differs only by ``ema`` reuse the EMA-on trajectory
    twins: dict[int, int] = {}
    if share_ema:
        by_key: dict[str, list[int]] = {}
        for i, cfg in enumerate(cfgs):
            by_key.setdefault(_ema_key(cfg), []).append(i)
        for idx in by_key.values():
            on = [i for i in idx if cfgs[i].ema]
            if on:
                for i in idx:
                    if not cfgs[i].ema:
                        twins[i] = on[0]
    to_run = [i for i in range(len(cfgs)) if i not in twins]

    def bundle_for(cfg):
        if cfg.family not in bundles:
            raise ConfigError(f"no {cfg.family} data bundle for objective {cfg.objective}")
        return bundles[cfg.family]

    outcomes: dict[int, tuple] = {}
    missing = [i for i in to_run if cfgs[i].family not in bundles]
    for i in missing:
        outcomes[i] = ("failed", [], f"ConfigError: no {cfgs[i].family} data bundle")
    runnable = [i for i in to_run if i not in missing]
    if jobs > 1 and len(runnable) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = {i: pool.submit(_run_cell, cfgs[i], out_dir / names[i], bundle_for(cfgs[i]), probe)
                    for i in runnable}
            for i in runnable:
                outcomes[i] = futs[i].result()
    else:
        for i in runnable:
            outcomes[i] = _run_cell(cfgs[i], out_dir / names[i], bundle_for(cfgs[i]), probe)
            if log:
                log(names[i], outcomes[i][0])
    for i, j in twins.items():
        status, records, err = outcomes[j]
        derived = derive_ema_off(records)
        if (out_dir / names[j] / "config.json").exists():
            _write_derived(out_dir / names[j], out_dir / names[i], cfgs[i], derived, names[j])
        outcomes[i] = (status, derived, err)

    cells = [CellResult(names[i], cfgs[i], *outcomes[i]) for i in range(len(cfgs))]
    for c in cells:
        if c.status != "ok":
            (out_dir / c.name / "error.txt").write_text(c.error or "", encoding="utf-8")
    write_grid_csv(out_dir / "grid.csv", cells)
    return GridResult(out_dir, cells)


# -- aggregation ------------------------------------------------------------------

def grid_rows(cells: list[CellResult]) -> list[dict]:
    rows = []
    for c in cells:
        d = c.config.to_dict()
        base = {"cell": c.name, **{k: d[k] for k in CONFIG_COLUMNS if k != "cell"}}
        for r in c.records:
            rows.append({**base, **{k: r[k] for k in METRIC_COLUMNS}})
    return rows


def write_grid_csv(path: Path, cells: list[CellResult]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(CONFIG_COLUMNS) + list(METRIC_COLUMNS))
        w.writeheader()
        for row in grid_rows(cells):
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_grid_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        row = dict(r)
        for k in METRIC_COLUMNS:
            row[k] = int(row[k]) if k == "step" else float(row[k])
        row["seed"] = int(row["seed"])
        row["ema"] = row["ema"] == "True"
        out.append(row)
    return out


def frontiers(rows: list[dict], metric: str = "eval_loss") -> dict[str, list[dict]]:
    """Per-objective Pareto frontier of (cumulative FLOPs, metric) over every eval point."""
    out = {}
    for obj in sorted({r["objective"] for r in rows}):
        pts = [r for r in rows if r["objective"] == obj and r["flops"] > 0 and math.isfinite(r[metric])]
        front = pareto_frontier([(r["flops"], r[metric]) for r in pts])
        keep = []
        for c, m in front:
            r = next(r for r in pts if r["flops"] == c and r[metric] == m)
            keep.append({"objective": obj, "flops": c, metric: m, "cell": r["cell"], "step": r["step"]})
        out[obj] = keep
    return out


def fit_objectives(rows: list[dict], metric: str = "eval_loss") -> dict[str, dict]:
    """Power-law fit per objective on its frontier (all eval points if the frontier is too short)."""
    fits = {}
    fronts = frontiers(rows, metric)
    for obj, front in fronts.items():
        pts = [(r["flops"], r[metric]) for r in front]
        if len(pts) < 4:
            pts = [(r["flops"], r[metric]) for r in rows
                   if r["objective"] == obj and r["flops"] > 0 and math.isfinite(r[metric])]
        try:
            fit = fit_power_law([p[0] for p in pts], [p[1] for p in pts])
            fits[obj] = {**fit.to_dict(), "ok": bool(fit.ok)}
        except ValueError as exc:
            fits[obj] = {"a": None, "b": None, "c": None, "n": len(pts), "ok": False, "error": str(exc)}
    return fits


def write_frontier_csv(path: Path, fronts: dict[str, list[dict]], metric: str = "eval_loss"):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        cols = ["objective", "flops", metric, "cell", "step"]
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for rows in fronts.values():
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def summarize(out_dir: str | Path, rows: list[dict]) -> dict:
    """Write ``frontier.csv`` and ``fits.json`` next to ``grid.csv``."""
    out_dir = Path(out_dir)
    fronts = frontiers(rows)
    write_frontier_csv(out_dir / "frontier.csv", fronts)
    fits = fit_objectives(rows)
    (out_dir / "fits.json").write_text(json.dumps(fits, indent=2, sort_keys=True), encoding="utf-8")
    return fits


# -- EMA / schedule ablation --------------------------------------------------------

def ema_ablation_spec(base: dict, seeds=(0, 1, 2)) -> GridSpec:
    """2 objectives x 2 schedules x 2 EMA settings, repeated over ``seeds``."""
    return GridSpec(base=dict(base), axes={"objective": ["next_token", "flow_matching"],
                                           "lr_schedule": ["constant", "cosine"], "ema": [True, False],
                                           "seed": list(seeds)}, name="ema_ablation")


def final_records(rows: list[dict]) -> list[dict]:
    last: dict[str, dict] = {}
    for r in rows:
        if r["cell"] not in last or r["step"] > last[r["cell"]]["step"]:
            last[r["cell"]] = r
    return list(last.values())


def ema_ablation_table(rows: list[dict]) -> list[dict]:
    """One row per (objective, schedule, ema): final metrics averaged over seeds."""
    finals = final_records(rows)
    table = []
    for obj in ("next_token", "flow_matching"):
        for sched in ("constant", "cosine"):
            for ema in (True, False):
                sel = [r for r in finals if r["objective"] == obj and r["lr_schedule"] == sched and r["ema"] == ema]
                row = {"objective": obj, "lr_schedule": sched, "ema": ema, "seeds": len(sel)}
                for k in ("train_loss", "eval_loss", "ffd", "cond_consistency"):
                    row[k] = float(np.mean([r[k] for r in sel])) if sel else math.nan
                row["ffd_std"] = float(np.std([r["ffd"] for r in sel])) if sel else math.nan
                table.append(row)
    return table


def ema_direction(table: list[dict]) -> dict:
    """Whether EMA leaves constant-LR flow-matching FFD no worse; ``flagged`` asks for inspection."""
    on = next(r for r in table if r["objective"] == "flow_matching" and r["lr_schedule"] == "constant" and r["ema"])
    off = next(r for r in table if r["objective"] == "flow_matching" and r["lr_schedule"] == "constant"
               and not r["ema"])
    holds = bool(on["ffd"] <= off["ffd"])
    return {"ffd_ema_on": on["ffd"], "ffd_ema_off": off["ffd"], "holds": holds, "flagged": not holds}


def table_to_csv(table: list[dict], columns=ABLATION_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in table:
        w.writerow({k: r[k] for k in columns})
    return buf.getvalue()
