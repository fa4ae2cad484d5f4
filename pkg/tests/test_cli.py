"""Command line surface: every verb end to end on tiny workloads."""

import re

import pytest

from contourforge.cli import main
from contourforge.data import load_pairs


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synthdata")
    rc = main(["synth", "--count", "12", "--seed", "3", "--out", str(d)])
    assert rc == 0
    return d


def test_synth_writes_loadable_pairs(synth_dir):
    ds = load_pairs(synth_dir)
    assert len(ds) == 12
    assert (synth_dir / "manifest.tsv").exists()
    assert ds.samples[0].image.shape == (128, 128)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, synth_dir):
    out = tmp_path_factory.mktemp("run")
    rc = main([
        "train", "--kind", "sUNet", "--filter-base", "2",
        "--train", str(synth_dir), "--epochs", "1", "--iterations", "2",
        "--batch", "2", "--augmentation", "none", "--seed", "0",
        "--out", str(out),
    ])
    assert rc == 0
    return out


def test_train_writes_log_and_checkpoint(trained, capsys):
    logs = list(trained.glob("*.log.csv"))
    ckpts = list(trained.glob("*.ckpt"))
    assert len(logs) == 1 and len(ckpts) == 1
    text = logs[0].read_text(encoding="utf-8")
    assert text.startswith("epoch,train_loss,val_loss,train_dice,val_dice\n")


def test_train_echoes_epoch_lines(synth_dir, tmp_path, capsys):
    rc = main([
        "train", "--kind", "sUNet", "--filter-base", "2",
        "--train", str(synth_dir), "--epochs", "1", "--iterations", "1",
        "--batch", "2", "--augmentation", "none", "--out", str(tmp_path),
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert "epoch,train_loss,val_loss,train_dice,val_dice" in out
    assert re.search(r"^1,\d+\.\d{6},\d+\.\d{6},\d+\.\d{6},\d+\.\d{6}$", out, re.M)
    assert "status: ok" in out
    assert "checkpoint: " in out


def test_config_file_and_flag_precedence(synth_dir, tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(
        "model-kind = sUNet\nfilter-base = 2\nbatch_size = 2\n"
        "epochs = 9  # flag below overrides this\niterations-per-epoch = 1\n"
        f"train_dir = {synth_dir}\naugmentation = none\n",
        encoding="utf-8",
    )
    rc = main(["train", "--config", str(cfg), "--epochs", "1", "--out", str(tmp_path / "o")])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.count("\n1,") == 1  # exactly one epoch ran
    assert "\n2," not in out


def test_missing_kind_is_a_clean_error(synth_dir, tmp_path, capsys):
    rc = main(["train", "--train", str(synth_dir), "--out", str(tmp_path)])
    assert rc == 1
    assert "no network chosen" in capsys.readouterr().err


def test_test_verb_writes_metrics(trained, synth_dir, tmp_path, capsys):
    ckpt = next(iter(trained.glob("*.ckpt")))
    rc = main(["test", "--checkpoint", str(ckpt), "--data", str(synth_dir),
               "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "samples: 12" in out
    assert "mean_bce:" in out and "mean_dice:" in out
    csv_text = (tmp_path / "metrics.csv").read_text(encoding="utf-8")
    lines = csv_text.strip().split("\n")
    assert lines[0] == "id,bce,dice,msd_px,msd_mm,status"
    assert len(lines) == 13


def test_cross_test_verb(trained, synth_dir, tmp_path, capsys):
    ckpt = next(iter(trained.glob("*.ckpt")))
    rc = main(["cross-test", "--checkpoints", str(ckpt),
               "--data", f"synth={synth_dir}", "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "checkpoint,test_set,bce,dice,msd_px,msd_mm,n,n_empty" in out
    assert ",synth," in out
    assert (tmp_path / "cross_test.csv").exists()


def test_bench_verb(tmp_path, capsys):
    rc = main(["bench", "--kinds", "sUNet", "--filter-base", "2",
               "--extent", "64", "--out", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "kind,params,memory_bytes,fps" in out
    assert re.search(r"sUNet,\d+,\d+,\d+\.\d{2}", out)
    assert (tmp_path / "bench.csv").exists()


def test_report_verb(tmp_path, capsys):
    (tmp_path / "bench.csv").write_text("kind,fps\nsUNet,9.0\n", encoding="utf-8")
    rc = main(["report", "--out", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "report.md").exists()
    assert "## bench.csv" in (tmp_path / "report.md").read_text(encoding="utf-8")


def test_sweep_verb(synth_dir, tmp_path, capsys):
    rc = main([
        "sweep", "--kind", "sUNet", "--filter-base", "2", "--train", str(synth_dir),
        "--epochs", "1", "--iterations", "1", "--batch", "2",
        "--augmentation", "none", "--lrs", "0.003,0.001", "--out", str(tmp_path),
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert "lr,best_train_loss,best_val_loss,status" in out
    assert out.count(",ok") == 2
    assert (tmp_path / "sUNet_sweep.csv").exists()


def test_repeats_verb(synth_dir, tmp_path, capsys):
    rc = main([
        "repeats", "--kind", "sUNet", "--filter-base", "2", "--train", str(synth_dir),
        "--epochs", "1", "--iterations", "1", "--batch", "2", "--repeats", "2",
        "--augmentation", "none", "--out", str(tmp_path),
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert "runs_ok: 2/2" in out
    assert "metric,mean,std" in out
    assert (tmp_path / "sUNet_repeats.csv").exists()


def test_unknown_verb_exits_with_usage():
    with pytest.raises(SystemExit) as exc:
        main(["transmogrify"])
    assert exc.value.code == 2


def test_bad_checkpoint_path_is_clean_error(synth_dir, tmp_path, capsys):
    rc = main(["test", "--checkpoint", str(tmp_path / "missing.ckpt"),
               "--data", str(synth_dir), "--out", str(tmp_path)])
    assert rc == 1
    assert "error:" in capsys.readouterr().err
