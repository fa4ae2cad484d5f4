"""Experiment harness: determinism, divergence handling, aggregation
math, sweeps, cross-testing, benchmarks, config parsing.

Training runs here use a tiny filter base at extent 64 on a synthetic
band task that a few dozen optimizer steps can visibly learn.
"""

import math
import re
from dataclasses import replace

import numpy as np
import pytest

from contourforge.checkpoint import load_checkpoint
from contourforge.data import Dataset, Sample
from contourforge.harness import (
    LR_GRID,
    PROFILES,
    ExperimentConfig,
    RunRecord,
    aggregate_records,
    bench_table,
    benchmark_fps,
    config_from_file,
    cross_test,
    lr_sweep,
    predict,
    run_repeats,
    run_training,
    write_report,
)
from contourforge.nets import NetConfig, build
from contourforge.nn import count_params, memory_bytes


def band_ds(n, extent=64, seed=0, thickness=6, brightness=0.6):
    """Bright horizontal bands at random heights over a dim noisy floor."""
    rng = np.random.default_rng(seed)
    rows = np.arange(extent)[:, None]
    samples = []
    for i in range(n):
        c = extent // 2 + int(rng.integers(-8, 9))
        band = np.abs(rows - c) <= thickness // 2
        mask = np.broadcast_to(band, (extent, extent)).astype(np.uint8)
        img = 0.2 + brightness * mask + rng.normal(0.0, 0.05, (extent, extent))
        samples.append(
            Sample(np.clip(img, 0.0, 1.0).astype(np.float32), mask, f"b{i:03d}")
        )
    return Dataset(samples, provenance="synthetic")


def tiny_cfg(**kw):
    base = dict(
        model_kind="sUNet",
        learning_rate=0.002,
        batch_size=3,
        epochs=2,
        iterations_per_epoch=4,
        augmentation="none",
        repeats=1,
        filter_base=2,
        input_extent=64,
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def bands():
    return band_ds(24), band_ds(6, seed=99)


# ---------------------------------------------------------------------------
# configuration


def test_config_rejects_bad_values():
    with pytest.raises(ValueError, match="kind"):
        tiny_cfg(model_kind="resnet")
    with pytest.raises(ValueError, match="learning-rate"):
        tiny_cfg(learning_rate=0.0)
    with pytest.raises(ValueError, match="learning-rate"):
        tiny_cfg(learning_rate=-1.0)
    with pytest.raises(ValueError, match=">= 1"):
        tiny_cfg(batch_size=0)
    with pytest.raises(ValueError, match=">= 1"):
        tiny_cfg(repeats=0)
    with pytest.raises(ValueError, match=">= 1"):
        tiny_cfg(epochs=0)
    with pytest.raises(ValueError, match="augmentation"):
        tiny_cfg(augmentation="sometimes")


def test_config_defaults():
    cfg = ExperimentConfig(model_kind="wBowNet")
    assert cfg.learning_rate == 0.0005
    assert cfg.batch_size == 10
    assert cfg.repeats == 10
    assert cfg.px_to_mm_factor == 0.15
    assert cfg.variant == "online"
    assert ExperimentConfig(model_kind="BowNet", augmentation="offline").variant == "offline"
    assert ExperimentConfig(model_kind="BowNet", augmentation="none").variant == "online"


def test_profiles_share_one_sample_budget():
    # 60x50 and 50x60 are two accountings of the same 30000-draw protocol
    for name in ("full-60", "full-50"):
        cfg = ExperimentConfig(model_kind="sUNet", **PROFILES[name])
        assert cfg.total_batch_draws == 30000


def test_lr_grid_frozen():
    assert LR_GRID == (0.005, 0.0001, 0.0003, 0.0005, 0.0007, 0.0009, 0.00001)
    assert len(LR_GRID) == 7


# ---------------------------------------------------------------------------
# aggregation math (hand oracle)


def _rec(**kw):
    r = RunRecord(model_kind="sUNet", learning_rate=0.001, seed=0)
    for k, v in kw.items():
        setattr(r, k, v)
    return r


def test_aggregate_mean_and_sample_std():
    # {0.02, 0.04}: mean 0.03, sample std (ddof=1) = 0.01 * sqrt(2)
    recs = [_rec(best_val_loss=0.02), _rec(best_val_loss=0.04)]
    mean, std = aggregate_records(recs)["best_val_loss"]
    assert abs(mean - 0.03) < 1e-15
    assert abs(std - 0.014142135623730951) < 1e-15


def test_aggregate_excludes_diverged_runs():
    recs = [
        _rec(best_val_loss=0.02),
        _rec(best_val_loss=0.04),
        _rec(best_val_loss=123.0, status="N/A"),
    ]
    mean, std = aggregate_records(recs)["best_val_loss"]
    assert abs(mean - 0.03) < 1e-15
    assert abs(std - 0.014142135623730951) < 1e-15


def test_aggregate_degenerate_counts():
    one = aggregate_records([_rec(best_val_loss=0.5)])["best_val_loss"]
    assert one[0] == 0.5 and math.isnan(one[1])
    none = aggregate_records([_rec(status="N/A")])["best_val_loss"]
    assert math.isnan(none[0]) and math.isnan(none[1])


# ---------------------------------------------------------------------------
# training


def test_training_learns_the_band_task(bands, tmp_path):
    train, val = bands
    cfg = tiny_cfg(epochs=3, iterations_per_epoch=10, batch_size=4,
                   learning_rate=0.003)
    rec = run_training(cfg, train, val, out_dir=tmp_path)
    assert rec.status == "ok"
    assert len(rec.train_loss) == len(rec.val_loss) == 3
    assert rec.train_loss[-1] < rec.train_loss[0]
    # finalize wiring: best is min loss / max dice, last is the final epoch
    assert rec.best_val_loss == min(rec.val_loss)
    assert rec.last_val_loss == rec.val_loss[-1]
    assert rec.best_val_dice == max(rec.val_dice)
    assert rec.last_train_dice == rec.train_dice[-1]
    assert rec.wall_time > 0
    assert rec.checkpoint_path is not None


def test_checkpoint_is_loadable_and_predicts(bands, tmp_path):
    train, val = bands
    rec = run_training(tiny_cfg(), train, val, out_dir=tmp_path)
    net = load_checkpoint(rec.checkpoint_path, input_extent=64)
    assert net.kind == "sUNet"
    preds = predict(net, val, batch_size=4)
    assert preds.shape == (len(val), net.output_extent, net.output_extent)
    assert preds.min() >= 0.0 and preds.max() <= 1.0


def test_identical_configs_are_byte_identical(bands, tmp_path):
    train, val = bands
    cfg = tiny_cfg(seed=7)
    rec_a = run_training(cfg, train, val, out_dir=tmp_path / "a", run_name="r")
    rec_b = run_training(cfg, train, val, out_dir=tmp_path / "b", run_name="r")
    assert rec_a.train_loss == rec_b.train_loss
    assert rec_a.val_loss == rec_b.val_loss
    assert rec_a.val_dice == rec_b.val_dice
    log_a = (tmp_path / "a" / "r.log.csv").read_bytes()
    log_b = (tmp_path / "b" / "r.log.csv").read_bytes()
    assert log_a == log_b
    ck_a = (tmp_path / "a" / "r.ckpt").read_bytes()
    ck_b = (tmp_path / "b" / "r.ckpt").read_bytes()
    assert ck_a == ck_b


def test_different_seeds_differ(bands):
    train, val = bands
    rec_a = run_training(tiny_cfg(seed=0), train, val)
    rec_b = run_training(tiny_cfg(seed=1), train, val)
    assert rec_a.train_loss != rec_b.train_loss


def test_log_format(bands, tmp_path):
    train, val = bands
    cfg = tiny_cfg(epochs=2)
    run_training(cfg, train, val, out_dir=tmp_path, run_name="fmt")
    raw = (tmp_path / "fmt.log.csv").read_bytes()
    assert b"\r" not in raw
    lines = raw.decode("utf-8").split("\n")
    assert lines[-1] == ""
    lines = lines[:-1]
    assert lines[0] == "epoch,train_loss,val_loss,train_dice,val_dice"
    assert len(lines) == 1 + cfg.epochs
    row = re.compile(r"\d+,\d+\.\d{6},\d+\.\d{6},\d+\.\d{6},\d+\.\d{6}")
    for k, line in enumerate(lines[1:], 1):
        assert row.fullmatch(line), line
        assert line.split(",")[0] == str(k)


def test_divergent_lr_marks_na_without_crashing(bands, tmp_path):
    train, val = bands
    cfg = tiny_cfg(learning_rate=10.0, epochs=2, iterations_per_epoch=40,
                   batch_size=2)
    rec = run_training(cfg, train, val, out_dir=tmp_path)
    assert rec.status == "N/A"
    assert len(rec.val_loss) < cfg.epochs


def test_augmentation_modes_run(bands):
    train, val = bands
    for mode in ("online", "offline"):
        cfg = tiny_cfg(augmentation=mode, epochs=1, iterations_per_epoch=2)
        rec = run_training(cfg, train, val)
        assert rec.status == "ok"
        assert len(rec.train_loss) == 1


def test_missing_data_raises():
    with pytest.raises(ValueError, match="training data"):
        run_training(tiny_cfg())


def test_auto_split_when_no_val_given():
    all_ds = band_ds(30)
    cfg = tiny_cfg(epochs=1, iterations_per_epoch=2)
    rec = run_training(cfg, all_ds)
    assert rec.status == "ok"


# ---------------------------------------------------------------------------
# repeats / sweep


def test_repeats_uses_derived_seeds_and_aggregates(bands, tmp_path):
    train, val = bands
    cfg = tiny_cfg(repeats=3, seed=5)
    out = run_repeats(cfg, train, val, out_dir=tmp_path)
    assert [r.seed for r in out["records"]] == [5, 6, 7]
    assert out["n_ok"] == 3
    assert set(out["metrics"]) == {
        "best_train_loss", "last_train_loss", "best_val_loss", "last_val_loss",
        "best_train_dice", "last_train_dice", "best_val_dice", "last_val_dice",
    }
    solo = run_training(replace(cfg, seed=5), train, val)
    assert out["records"][0].best_val_loss == solo.best_val_loss
    table = (tmp_path / "sUNet_repeats.csv").read_text(encoding="utf-8")
    lines = table.strip().split("\n")
    assert lines[0] == "metric,mean,std"
    assert len(lines) == 9
    for line in lines[1:]:
        name, mean, std = line.split(",")
        assert re.fullmatch(r"\d+\.\d{6}", mean)
        assert re.fullmatch(r"\d+\.\d{6}", std)


def test_lr_sweep_rows_match_standalone_runs(bands, tmp_path):
    train, val = bands
    cfg = tiny_cfg()
    lrs = (0.003, 0.001)
    rows = lr_sweep(cfg, lrs, train, val, out_dir=tmp_path)
    assert [r["lr"] for r in rows] == list(lrs)
    solo = run_training(replace(cfg, learning_rate=0.001), train, val)
    assert rows[1]["best_val_loss"] == solo.best_val_loss
    assert rows[1]["best_train_loss"] == solo.best_train_loss
    # each learning rate is an independent run: order cannot matter
    rev = lr_sweep(cfg, lrs[::-1], train, val)
    assert rev[1]["best_val_loss"] == rows[0]["best_val_loss"]
    assert rev[0]["best_val_loss"] == rows[1]["best_val_loss"]
    csv_text = (tmp_path / "sUNet_sweep.csv").read_text(encoding="utf-8")
    lines = csv_text.strip().split("\n")
    assert lines[0] == "lr,best_train_loss,best_val_loss,status"
    assert len(lines) == 3


def test_lr_sweep_rejects_empty_grid(bands):
    train, val = bands
    with pytest.raises(ValueError, match="non-empty"):
        lr_sweep(tiny_cfg(), (), train, val)


# ---------------------------------------------------------------------------
# cross-test


def test_cross_test_covers_the_cartesian_product(bands, tmp_path):
    train, val = bands
    rec_a = run_training(tiny_cfg(seed=0), train, val, out_dir=tmp_path, run_name="m0")
    rec_b = run_training(tiny_cfg(seed=1), train, val, out_dir=tmp_path, run_name="m1")
    sets = {"near": band_ds(4, seed=5), "far": band_ds(5, seed=6)}
    rows = cross_test([rec_a.checkpoint_path, rec_b.checkpoint_path], sets,
                      factor=0.15, out_dir=tmp_path)
    assert len(rows) == 4
    assert {(r["checkpoint"], r["test_set"]) for r in rows} == {
        ("m0", "near"), ("m0", "far"), ("m1", "near"), ("m1", "far"),
    }
    for r in rows:
        assert r["n"] == len(sets[r["test_set"]])
        assert math.isfinite(r["bce"])
        assert 0.0 <= r["dice"] <= 1.0
        assert 0 <= r["n_empty"] <= r["n"]
    matrix = (tmp_path / "cross_test.csv").read_text(encoding="utf-8")
    lines = matrix.strip().split("\n")
    assert lines[0] == "checkpoint,test_set,bce,dice,msd_px,msd_mm,n,n_empty"
    assert len(lines) == 5
    samples_csv = (tmp_path / "cross_test_samples.csv").read_text(encoding="utf-8")
    assert len(samples_csv.strip().split("\n")) == 1 + 2 * (4 + 5)


def test_cross_test_requires_inputs():
    with pytest.raises(ValueError, match="at least one"):
        cross_test([], {})


# ---------------------------------------------------------------------------
# benchmark


def test_benchmark_reports_size_and_speed_columns():
    row = benchmark_fps("sUNet", batch_size=1, filter_base=2, input_extent=64)
    net = build("sUNet", NetConfig(filter_base=2, input_extent=64))
    assert row["kind"] == "sUNet"
    assert row["params"] == count_params(net)
    assert row["memory_bytes"] == memory_bytes(net) == 4 * row["params"]
    assert row["fps"] > 0


def test_bench_table_csv(tmp_path):
    rows = bench_table(("sUNet", "BowNet"), batch_size=1, filter_base=2,
                       input_extent=64, out_dir=tmp_path)
    assert [r["kind"] for r in rows] == ["sUNet", "BowNet"]
    text = (tmp_path / "bench.csv").read_text(encoding="utf-8")
    lines = text.strip().split("\n")
    assert lines[0] == "kind,params,memory_bytes,fps"
    assert len(lines) == 3


# ---------------------------------------------------------------------------
# report / config file


def test_write_report_collects_csvs(tmp_path):
    (tmp_path / "bench.csv").write_text("kind,fps\nsUNet,12.5\n", encoding="utf-8")
    (tmp_path / "sweep.csv").write_text("lr,loss\n0.001,0.25\n", encoding="utf-8")
    path = write_report(tmp_path)
    text = path.read_text(encoding="utf-8")
    assert "## bench.csv" in text
    assert "## sweep.csv" in text
    assert "| sUNet | 12.5 |" in text


def test_config_file_parsing(tmp_path):
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text(
        "# tiny experiment\n"
        "model-kind = BowNet\n"
        "learning_rate = 0.001  # tuned by sweep\n"
        "epochs = 2\n"
        "profile = full-50\n"
        "filter-base = 4\n"
        "val_dir = none\n"
        "augmentation = offline\n",
        encoding="utf-8",
    )
    kw = config_from_file(cfg_file)
    cfg = ExperimentConfig(**kw)
    assert cfg.model_kind == "BowNet"
    assert cfg.learning_rate == 0.001
    # profile appears after epochs, so its values win
    assert cfg.epochs == 50 and cfg.iterations_per_epoch == 60
    assert cfg.filter_base == 4
    assert cfg.val_dir is None
    assert cfg.augmentation == "offline"


def test_config_file_rejects_unknown_keys(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = red\n", encoding="utf-8")
    with pytest.raises(ValueError, match="unknown config key"):
        config_from_file(bad)
    bad.write_text("just a line\n", encoding="utf-8")
    with pytest.raises(ValueError, match="key = value"):
        config_from_file(bad)
    bad.write_text("profile = warp9\n", encoding="utf-8")
    with pytest.raises(ValueError, match="unknown profile"):
        config_from_file(bad)
