import json
import math

import numpy as np
import pytest

import latentlab.harness.train as train_mod
from latentlab.accounting import forward_flops, training_flops
from latentlab.codec import Autoencoder, CodecConfig
from latentlab.errors import ConfigError, DivergenceError
from latentlab.harness.grid import (
    ABLATION_COLUMNS,
    DataBundle,
    GridSpec,
    ema_ablation_spec,
    ema_ablation_table,
    ema_direction,
    frontiers,
    read_grid_csv,
    run_experiment_grid,
    summarize,
    table_to_csv,
)
from latentlab.harness.train import (
    EVAL_START,
    METRIC_COLUMNS,
    NONDETERMINISTIC_COLUMNS,
    TrainConfig,
    desk_recipe,
    encode_split,
    load_encoded,
    load_run,
    read_metrics,
    save_encoded,
    train_run,
)

TINY = {"layers": 1, "hidden": 32, "heads": 2}


@pytest.fixture(scope="module")
def bundles():
    out = {}
    for fam, cc in (("discrete", CodecConfig(regularizer="LFQ", vocab_size=16, arch="patch", downsample=8,
                                             patch_hidden=16)),
                    ("continuous", CodecConfig(regularizer="KL", arch="patch", downsample=8, patch_hidden=16,
                                               latent_channels=2))):
        codec = Autoencoder(cc, 0)
        out[fam] = DataBundle(encode_split(codec, 128), encode_split(codec, 32, start=EVAL_START), codec)
    return out


def cfg(objective="next_token", **kw):
    base = dict(objective=objective, steps=6, batch_size=4, eval_every=3, eval_size=16, warmup_steps=2,
                ema_interval=1, backbone=TINY)
    base.update(kw)
    return TrainConfig(**base)


def run(c, tmp_path, bundles, name="r", **kw):
    b = bundles["continuous" if c.objective == "flow_matching" else "discrete"]
    return train_run(c, tmp_path / name, b.train, b.eval, b.codec, **kw)


def strip(records):
    return [{k: v for k, v in r.items() if k not in NONDETERMINISTIC_COLUMNS} for r in records]


def same(a, b):
    return all(x == y or (isinstance(x, float) and math.isnan(x) and math.isnan(y)) for x, y in zip(a, b))


@pytest.mark.parametrize("objective", ["next_token", "masked_token", "flow_matching"])
def test_same_seed_gives_identical_logs(tmp_path, bundles, objective):
    a = run(cfg(objective), tmp_path, bundles, "a")
    b = run(cfg(objective), tmp_path, bundles, "b")
    ra, rb = strip(read_metrics(a.run_dir / "metrics.csv")), strip(read_metrics(b.run_dir / "metrics.csv"))
    assert [r["step"] for r in ra] == [0, 3, 6]
    for x, y in zip(ra, rb):
        assert same(list(x.values()), list(y.values()))
    c = run(cfg(objective, seed=1), tmp_path, bundles, "c")
    assert c.records[-1]["eval_loss"] != a.records[-1]["eval_loss"]


def test_flops_column_matches_closed_form(tmp_path, bundles):
    res = run(cfg(), tmp_path, bundles)
    fwd = forward_flops(res.backbone).total
    for r in read_metrics(res.run_dir / "metrics.csv"):
        assert r["flops"] == training_flops(fwd, r["step"] * 4)
    meta = json.loads((res.run_dir / "config.json").read_text())
    assert meta["forward_flops"] == fwd and meta["backbone"]["layers"] == 1


def test_ema_off_run_equals_raw_columns(tmp_path, bundles):
    on = run(cfg("flow_matching", ema_interval=2), tmp_path, bundles, "on")
    off = run(cfg("flow_matching", ema=False), tmp_path, bundles, "off")
    for a, b in zip(on.records, off.records):
        assert a["eval_loss_raw"] == b["eval_loss"]
        assert a["train_loss"] == b["train_loss"] or math.isnan(a["train_loss"])
    assert on.records[-1]["eval_loss"] != on.records[-1]["eval_loss_raw"]


def test_checkpoints_and_reload(tmp_path, bundles):
    res = run(cfg(checkpoint_every=3), tmp_path, bundles)
    names = sorted(p.name for p in (res.run_dir / "checkpoints").iterdir())
    assert names == ["000003.ema", "000003.raw", "000006.ema", "000006.raw"]
    model, c, _ = load_run(res.run_dir, "raw")
    for k, p in res.model.parameters().items():
        np.testing.assert_array_equal(model.parameters()[k].data, p.data)
    ema_model, _, _ = load_run(res.run_dir, "ema")
    for k in res.ema.shadow:
        np.testing.assert_array_equal(ema_model.parameters()[k].data, res.ema.shadow[k])
    assert json.loads((res.run_dir / "status.json").read_text())["status"] == "ok"


def test_sample_metrics_and_images(tmp_path, bundles, probe):
    res = run(cfg("masked_token", steps=3, sample_count=4, sample_steps=2), tmp_path, bundles, probe=probe)
    r = res.records[-1]
    assert np.isfinite(r["ffd"]) and 0 <= r["cond_consistency"] <= 1
    assert len(list((res.run_dir / "samples" / "step_000003").glob("*.ppm"))) == 4


def test_divergence_is_reported(tmp_path, bundles, monkeypatch):
    real = train_mod.objective_loss

    def poisoned(model, x, cond, rng):
        out = real(model, x, cond, rng)
        out.loss = out.loss * float("nan")
        return out

    monkeypatch.setattr(train_mod, "objective_loss", poisoned)
    with pytest.raises(DivergenceError):
        run(cfg(), tmp_path, bundles)
    status = json.loads((tmp_path / "r" / "status.json").read_text())
    assert status["status"] == "diverged" and status["step"] == 1


@pytest.mark.parametrize("bad", [dict(objective="gan"), dict(steps=0), dict(cond_dropout=1.0),
                                 dict(sample_count=1), dict(warmup_steps=20, steps=10),
                                 dict(lr_schedule="cosine", peak_lr=1e-5)])
def test_train_config_rejects(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_config_defaults_and_recipe():
    assert TrainConfig(objective="flow_matching").resolved_peak_lr == 1e-4
    assert TrainConfig().resolved_peak_lr == 3e-3
    assert desk_recipe(250_000) == {"warmup_steps": 1000, "ema_interval": 100}
    assert desk_recipe(2500) == {"warmup_steps": 10, "ema_interval": 1}


def test_family_data_mismatch_and_unknown_keys(tmp_path, bundles):
    with pytest.raises(ConfigError):
        train_run(cfg("flow_matching"), tmp_path / "x", bundles["discrete"].train)
    with pytest.raises(ConfigError):
        train_run(cfg(backbone={"depth": 3}), tmp_path / "y", bundles["discrete"].train)
    with pytest.raises(ConfigError):
        train_run(cfg(), tmp_path / "z")


def test_encoded_data_on_disk(tmp_path, bundles):
    b = bundles["discrete"]
    save_encoded(b.train, tmp_path / "d", b.codec)
    back = load_encoded(tmp_path / "d")
    np.testing.assert_array_equal(back.seqs, b.train.seqs)
    np.testing.assert_array_equal(back.reference_images(3), b.train.reference_images(3))
    res = train_run(cfg(data=str(tmp_path / "d")), tmp_path / "run")
    assert len(res.records) == 3


def test_grid_two_by_two(tmp_path, bundles):
    spec = GridSpec(base=cfg().to_dict(), axes={"objective": ["next_token", "flow_matching"],
                                                "lr_schedule": ["constant", "cosine"]})
    res = run_experiment_grid(spec, tmp_path / "g", bundles)
    dirs = sorted(p.name for p in (tmp_path / "g").iterdir() if p.is_dir())
    assert dirs == ["cell_000", "cell_001", "cell_002", "cell_003"]
    rows = read_grid_csv(tmp_path / "g" / "grid.csv")
    assert len(rows) == 4 * 3 == len(res.rows())
    fits = summarize(tmp_path / "g", rows)
    assert set(fits) == {"next_token", "flow_matching"}
    assert all({"a", "b", "c"} <= set(v) for v in fits.values())
    assert (tmp_path / "g" / "frontier.csv").exists()
    assert all(r["flops"] > 0 for front in frontiers(rows).values() for r in front)


def test_grid_records_failed_cells(tmp_path, bundles):
    spec = GridSpec(base=cfg().to_dict(), axes={"objective": ["next_token", "flow_matching"]})
    res = run_experiment_grid(spec, tmp_path / "g", {"discrete": bundles["discrete"]})
    assert [c.status for c in res.cells] == ["ok", "failed"]
    assert "continuous" in (tmp_path / "g" / "cell_001" / "error.txt").read_text()
    assert len(read_grid_csv(tmp_path / "g" / "grid.csv")) == 3


def test_grid_shares_ema_trajectories(tmp_path, bundles):
    spec = GridSpec(base=cfg().to_dict(), axes={"ema": [True, False]})
    res = run_experiment_grid(spec, tmp_path / "g", bundles)
    solo = run(cfg(ema=False), tmp_path, bundles, "solo")
    derived = res.cells[1].records
    assert [r["eval_loss"] for r in derived] == [r["eval_loss"] for r in solo.records]
    meta = json.loads((tmp_path / "g" / "cell_001" / "config.json").read_text())
    assert meta["shared_trajectory_with"] == "cell_000" and meta["train"]["ema"] is False


def test_empty_grid_is_rejected(tmp_path):
    with pytest.raises(ConfigError):
        GridSpec().expand()
    with pytest.raises(ConfigError):
        GridSpec(axes={"seed": []}).expand()


def test_ablation_table_structure():
    spec = ema_ablation_spec({})
    cells = spec.expand()
    assert len(cells) == 24
    rows = []
    for i, c in enumerate(cells):
        ffd = 1.0 + (0.5 if not c["ema"] else 0.0)
        rows.append({"cell": f"c{i}", "step": 10, "objective": c["objective"], "lr_schedule": c["lr_schedule"],
                     "ema": c["ema"], "train_loss": 1.0, "eval_loss": 2.0, "ffd": ffd + c["seed"],
                     "cond_consistency": 0.5})
    table = ema_ablation_table(rows)
    assert len(table) == 8 and all(r["seeds"] == 3 for r in table)
    assert len({(r["objective"], r["lr_schedule"], r["ema"]) for r in table}) == 8
    d = ema_direction(table)
    assert d["holds"] and not d["flagged"] and d["ffd_ema_on"] == 2.0
    assert table_to_csv(table).splitlines()[0] == ",".join(ABLATION_COLUMNS)
    for r in table:
        if not r["ema"]:
            r["ffd"] = 0.0
    assert ema_direction(table)["flagged"]


def test_until_stops_at_first_true_evaluation(tmp_path, bundles):
    res = run(cfg(steps=9), tmp_path, bundles, until=lambda recs: recs[-1]["step"] >= 3)
    assert [r["step"] for r in res.records] == [0, 3]
    assert json.loads((res.run_dir / "status.json").read_text())["step"] == 3
    load_run(res.run_dir)
    assert (res.run_dir / "checkpoints" / "000003.raw").exists()
