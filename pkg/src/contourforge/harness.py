"""Experiment driver: training runs, LR sweeps, repeated runs with
mean/STD aggregation, cross-dataset evaluation, fps benchmarks.

Determinism contract: (config, seed) fixes everything. The run seed is
split into independent child streams (net init, batch sampling,
augmentation, dropout), logs use fixed decimal formatting with LF
endings, and wall-clock time never enters a log file, so identical runs
produce byte-identical logs and checkpoints.

Divergence guard: the optimizer always sees the numerically stable
logits-form cross entropy, but each iteration also evaluates the loss
the textbook way, through the float32 sigmoid. Saturation on the wrong
side of a label (a confidently wrong pixel) makes that monitor
non-finite, which is terminal: the run is marked "N/A" at once, just as
a propagating NaN kills training in any conventional stack. A finite
monitor above 1e4 must persist for three consecutive iterations before
the run is abandoned. Working learning rates never trip either branch:
their saturated pixels sit on the correct side, where the guarded log
terms stay finite.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autograd import Tensor, bce_from_logits, dice_coef, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    AugmentConfig,
    Dataset,
    augment_offline,
    augment_online,
    load_pairs,
    split_dataset,
)
from .nets import KINDS, NetConfig, build
from .nn import count_params, memory_bytes
from .optim import Adam
from .postprocess import DEFAULT_MM_PER_PX, evaluate, write_metrics_csv

LR_GRID = (0.005, 0.0001, 0.0003, 0.0005, 0.0007, 0.0009, 0.00001)

# two accountings of one full-scale protocol: both total 30000 batch draws
PROFILES = {
    "full-60": {"epochs": 60, "iterations_per_epoch": 50},
    "full-50": {"epochs": 50, "iterations_per_epoch": 60},
}

DIVERGENCE_THRESHOLD = 1e4
DIVERGENCE_PATIENCE = 3

METRIC_NAMES = (
    "best_train_loss", "last_train_loss", "best_val_loss", "last_val_loss",
    "best_train_dice", "last_train_dice", "best_val_dice", "last_val_dice",
)

__all__ = [
    "LR_GRID", "PROFILES", "ExperimentConfig", "RunRecord",
    "run_training", "run_repeats", "aggregate_records", "lr_sweep",
    "cross_test", "benchmark_fps", "bench_table", "predict",
    "write_report", "config_from_file",
]


@dataclass(frozen=True)
class ExperimentConfig:
    model_kind: str
    learning_rate: float = 0.0005
    batch_size: int = 10
    epochs: int = 60
    iterations_per_epoch: int = 50
    augmentation: str = "online"
    train_dir: str | None = None
    val_dir: str | None = None
    test_dir: str | None = None
    test2_dir: str | None = None
    seed: int = 0
    repeats: int = 10
    dropout_rate: float = 0.0
    px_to_mm_factor: float = DEFAULT_MM_PER_PX
    filter_base: int | None = None
    kernel_size: int = 3
    input_extent: int = 128

    def __post_init__(self) -> None:
        if self.model_kind not in KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}, expected one of {KINDS}")
        if not self.learning_rate > 0:
            raise ValueError("learning-rate must be positive")
        if self.batch_size < 1 or self.repeats < 1:
            raise ValueError("batch-size and repeats must be >= 1")
        if self.epochs < 1 or self.iterations_per_epoch < 1:
            raise ValueError("epochs and iterations-per-epoch must be >= 1")
        if self.augmentation not in ("online", "offline", "none"):
            raise ValueError("augmentation must be online, offline, or none")

    @property
    def variant(self) -> str:
        return "offline" if self.augmentation == "offline" else "online"

    @property
    def total_batch_draws(self) -> int:
        return self.epochs * self.iterations_per_epoch * self.batch_size


@dataclass
class RunRecord:
    model_kind: str
    learning_rate: float
    seed: int
    status: str = "ok"
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    train_dice: list = field(default_factory=list)
    val_dice: list = field(default_factory=list)
    best_train_loss: float = math.nan
    last_train_loss: float = math.nan
    best_val_loss: float = math.nan
    last_val_loss: float = math.nan
    best_train_dice: float = math.nan
    last_train_dice: float = math.nan
    best_val_dice: float = math.nan
    last_val_dice: float = math.nan
    wall_time: float = 0.0
    checkpoint_path: str | None = None

    def finalize(self) -> None:
        # best loss is the minimum over epochs, best dice the maximum,
        # "last" the final completed epoch; nothing orders best vs last
        if self.train_loss:
            self.best_train_loss = min(self.train_loss)
            self.last_train_loss = self.train_loss[-1]
            self.best_train_dice = max(self.train_dice)
            self.last_train_dice = self.train_dice[-1]
        if self.val_loss:
            self.best_val_loss = min(self.val_loss)
            self.last_val_loss = self.val_loss[-1]
            self.best_val_dice = max(self.val_dice)
            self.last_val_dice = self.val_dice[-1]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _divergence_monitor(z: np.ndarray, y: np.ndarray) -> float:
    """Textbook cross entropy through the float32 sigmoid.

    Goes +inf exactly when some pixel saturates on the wrong side of its
    label (log of a hard 0); correct-side saturation contributes log(1)
    and stays finite. This is the quantity the sentinel watches.
    """
    z32 = z.astype(np.float32, copy=False)
    p = np.empty_like(z32)
    pos = z32 >= 0
    p[pos] = 1.0 / (1.0 + np.exp(-z32[pos]))
    ez = np.exp(z32[~pos])
    p[~pos] = ez / (1.0 + ez)
    p64 = p.astype(np.float64)
    with np.errstate(divide="ignore"):
        terms = np.where(y > 0.5, np.log(p64), np.log1p(-p64))
    return float(-terms.mean())


def _crop_center(mask: np.ndarray, out: int) -> np.ndarray:
    e = mask.shape[0]
    off = (e - out) // 2
    return mask[off : off + out, off : off + out]


def _resolve_datasets(config: ExperimentConfig, train_ds, val_ds):
    if train_ds is None:
        if config.train_dir is None:
            raise ValueError("no training data: pass a dataset or set train_dir")
        train_ds = load_pairs(config.train_dir)
    if val_ds is None and config.val_dir is not None:
        val_ds = load_pairs(config.val_dir)
    if val_ds is None:
        # single-directory flow: carve a deterministic 80/10/10 split
        tagged = split_dataset(train_ds, (0.8, 0.1, 0.1), seed=config.seed)
        train_ds, val_ds = tagged.subset("train"), tagged.subset("val")
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("train and validation sets must be non-empty")
    return train_ds, val_ds


def _batch_arrays(samples, out_extent: int):
    x = np.stack([s.image for s in samples])[:, None, :, :].astype(np.float32)
    y = np.stack([_crop_center(s.mask, out_extent) for s in samples])
    return x, y[:, None, :, :].astype(np.float32)


def _validate(net, val_ds, batch_size: int, out_extent: int):
    """Weighted-by-batch mean of logits BCE and soft dice over the set."""
    net.eval()
    loss_sum = 0.0
    dice_sum = 0.0
    n = len(val_ds)
    with no_grad():
        for lo in range(0, n, batch_size):
            chunk = val_ds.samples[lo : lo + batch_size]
            x, y = _batch_arrays(chunk, out_extent)
            z = net.forward_logits(Tensor(x)).data
            zl = z.astype(np.float64)
            loss = float(np.mean(np.maximum(zl, 0) - zl * y + np.log1p(np.exp(-np.abs(zl)))))
            d = float(dice_coef(_sigmoid(zl), y.astype(np.float64)))
            loss_sum += loss * len(chunk)
            dice_sum += d * len(chunk)
    net.train()
    return loss_sum / n, dice_sum / n


def run_training(config: ExperimentConfig, train_ds: Dataset | None = None,
                 val_ds: Dataset | None = None, out_dir=None,
                 run_name: str | None = None, echo: bool = False) -> RunRecord:
    """One full training run: per-epoch log, best-val-loss checkpoint,
    divergence sentinel. Deterministic in (config, seed); ``echo``
    mirrors each epoch's log line to stdout as it completes."""
    t0 = time.perf_counter()
    train_ds, val_ds = _resolve_datasets(config, train_ds, val_ds)

    ss = np.random.SeedSequence(config.seed)
    net_ss, batch_ss, aug_ss, drop_ss = ss.spawn(4)
    net_seed = int(net_ss.generate_state(1)[0])
    batch_rng = np.random.default_rng(batch_ss)
    aug_rng = np.random.default_rng(aug_ss)
    aug_cfg = AugmentConfig()

    if config.augmentation == "offline":
        offline_seed = int(aug_ss.generate_state(1)[0])
        train_ds = augment_offline(train_ds, aug_cfg, copies=1, seed=offline_seed)

    net = build(config.model_kind, NetConfig(
        kernel_size=config.kernel_size,
        filter_base=config.filter_base,
        variant=config.variant,
        dropout_rate=config.dropout_rate,
        seed=net_seed,
        input_extent=config.input_extent,
    ))
    if config.dropout_rate > 0:
        net.set_dropout_rng(np.random.default_rng(drop_ss))
    out_extent = net.output_extent
    opt = Adam(list(net.parameters()), lr=config.learning_rate)

    record = RunRecord(config.model_kind, config.learning_rate, config.seed)
    run_name = run_name or f"{config.model_kind}_lr{config.learning_rate:g}_seed{config.seed}"
    log_lines = ["epoch,train_loss,val_loss,train_dice,val_dice\n"]
    ckpt_path = None
    best_val = math.inf
    n_train = len(train_ds)
    streak = 0
    diverged = False

    for epoch in range(1, config.epochs + 1):
        losses = []
        dices = []
        for _ in range(config.iterations_per_epoch):
            idx = batch_rng.integers(0, n_train, size=config.batch_size)
            chunk = [train_ds.samples[int(i)] for i in idx]
            if config.augmentation == "online":
                chunk = [augment_online(s, aug_cfg, aug_rng) for s in chunk]
            x, y = _batch_arrays(chunk, out_extent)
            logits = net.forward_logits(Tensor(x))
            loss = bce_from_logits(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            lval = float(loss.data)
            losses.append(lval)
            dices.append(float(dice_coef(_sigmoid(logits.data.astype(np.float64)),
                                         y.astype(np.float64))))
            mon = _divergence_monitor(logits.data, y)
            if not math.isfinite(mon) or not math.isfinite(lval):
                diverged = True  # terminal, as a propagating NaN would be
                break
            if mon > DIVERGENCE_THRESHOLD:
                streak += 1
                if streak >= DIVERGENCE_PATIENCE:
                    diverged = True
                    break
            else:
                streak = 0
        if diverged:
            record.status = "N/A"
            break
        vl, vd = _validate(net, val_ds, config.batch_size, out_extent)
        record.train_loss.append(float(np.mean(losses)))
        record.train_dice.append(float(np.mean(dices)))
        record.val_loss.append(vl)
        record.val_dice.append(vd)
        line = f"{epoch},{record.train_loss[-1]:.6f},{vl:.6f},{record.train_dice[-1]:.6f},{vd:.6f}\n"
        log_lines.append(line)
        if echo:
            print(line, end="", flush=True)
        if out_dir is not None and vl < best_val:
            best_val = vl
            ckpt_path = Path(out_dir) / f"{run_name}.ckpt"
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(net, ckpt_path)

    record.finalize()
    record.checkpoint_path = str(ckpt_path) if ckpt_path else None
    record.wall_time = time.perf_counter() - t0
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_path = Path(out_dir) / f"{run_name}.log.csv"
        with open(log_path, "w", encoding="utf-8", newline="") as f:
            f.writelines(log_lines)
    return record


def aggregate_records(records) -> dict:
    """Mean and sample standard deviation (ddof=1) of each best/last
    loss/dice metric over the non-diverged records. A single survivor
    has no spread (std is NaN); no survivors means all-NaN."""
    ok = [r for r in records if r.status == "ok"]
    metrics = {}
    for m in METRIC_NAMES:
        vals = np.array([getattr(r, m) for r in ok], dtype=np.float64)
        if len(vals) == 0:
            metrics[m] = (math.nan, math.nan)
        elif len(vals) == 1:
            metrics[m] = (float(vals[0]), math.nan)
        else:
            metrics[m] = (float(vals.mean()), float(vals.std(ddof=1)))
    return metrics


def run_repeats(config: ExperimentConfig, train_ds: Dataset | None = None,
                val_ds: Dataset | None = None, out_dir=None) -> dict:
    """Repeat the run with derived seeds (seed + k) and aggregate each
    best/last loss/dice metric as mean and sample standard deviation.
    Diverged runs are excluded from the statistics."""
    records = []
    for k in range(config.repeats):
        cfg = replace(config, seed=config.seed + k)
        name = f"{cfg.model_kind}_lr{cfg.learning_rate:g}_seed{cfg.seed}_rep{k}"
        records.append(run_training(cfg, train_ds, val_ds, out_dir, run_name=name))
    ok = [r for r in records if r.status == "ok"]
    metrics = aggregate_records(records)
    if out_dir is not None:
        path = Path(out_dir) / f"{config.model_kind}_repeats.csv"
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "mean", "std"])
            for m in METRIC_NAMES:
                mean, std = metrics[m]
                w.writerow([m, f"{mean:.6f}", f"{std:.6f}"])
    return {"metrics": metrics, "n_ok": len(ok), "records": records}


def lr_sweep(config: ExperimentConfig, lrs=LR_GRID, train_ds: Dataset | None = None,
             val_ds: Dataset | None = None, out_dir=None) -> list:
    """One run per learning rate; rows carry best train/val loss (the
    sweep's tuning criteria) or the N/A sentinel for diverged runs."""
    if not lrs:
        raise ValueError("lr list must be non-empty")
    rows = []
    for lr in lrs:
        cfg = replace(config, learning_rate=lr)
        rec = run_training(cfg, train_ds, val_ds, out_dir)
        rows.append({
            "lr": lr,
            "best_train_loss": rec.best_train_loss,
            "best_val_loss": rec.best_val_loss,
            "status": rec.status,
        })
    if out_dir is not None:
        path = Path(out_dir) / f"{config.model_kind}_sweep.csv"
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(["lr", "best_train_loss", "best_val_loss", "status"])
            for row in rows:
                if row["status"] == "ok":
                    w.writerow([f"{row['lr']:g}", f"{row['best_train_loss']:.6f}",
                                f"{row['best_val_loss']:.6f}", "ok"])
                else:
                    w.writerow([f"{row['lr']:g}", "N/A", "N/A", "N/A"])
    return rows


def predict(net, dataset: Dataset, batch_size: int = 10) -> np.ndarray:
    """Stacked sigmoid prediction maps for every sample, in dataset order."""
    net.eval()
    outs = []
    with no_grad():
        for lo in range(0, len(dataset), batch_size):
            chunk = dataset.samples[lo : lo + batch_size]
            x = np.stack([s.image for s in chunk])[:, None, :, :].astype(np.float32)
            outs.append(net.forward(Tensor(x)).data[:, 0])
    return np.concatenate(outs, axis=0)


def cross_test(checkpoint_paths, test_sets, factor: float = DEFAULT_MM_PER_PX,
               out_dir=None, batch_size: int = 10) -> list:
    """Cartesian evaluation of checkpoints across named test sets.

    ``test_sets`` maps name -> Dataset (or directory path). Cell values
    are means over the set; surface distances average the samples whose
    contours exist, with the empty-contour count reported alongside.
    """
    if not checkpoint_paths or not test_sets:
        raise ValueError("need at least one checkpoint and one test set")
    resolved = {}
    for name, ds in dict(test_sets).items():
        resolved[name] = ds if isinstance(ds, Dataset) else load_pairs(ds)
    rows = []
    per_sample = []
    nets = {}
    for ckpt in checkpoint_paths:
        ckpt_name = Path(ckpt).stem
        for set_name, ds in resolved.items():
            # weights are extent-agnostic; geometry follows the test data
            extent = ds.samples[0].image.shape[0]
            if (ckpt, extent) not in nets:
                nets[ckpt, extent] = load_checkpoint(ckpt, input_extent=extent)
            net = nets[ckpt, extent]
            out_extent = net.output_extent
            preds = predict(net, ds, batch_size)
            reports = []
            for s, pred in zip(ds.samples, preds):
                rep = evaluate(pred, _crop_center(s.mask, out_extent), factor)
                reports.append(rep)
                per_sample.append((f"{ckpt_name}:{set_name}:{s.id}", rep))
            ok = [r for r in reports if r.status == "ok"]
            rows.append({
                "checkpoint": ckpt_name,
                "test_set": set_name,
                "bce": float(np.mean([r.bce for r in reports])),
                "dice": float(np.mean([r.dice for r in reports])),
                "msd_px": float(np.mean([r.msd_px for r in ok])) if ok else math.nan,
                "msd_mm": float(np.mean([r.msd_mm for r in ok])) if ok else math.nan,
                "n": len(reports),
                "n_empty": len(reports) - len(ok),
            })
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "cross_test.csv", "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(["checkpoint", "test_set", "bce", "dice", "msd_px", "msd_mm", "n", "n_empty"])
            for r in rows:
                w.writerow([r["checkpoint"], r["test_set"], f"{r['bce']:.6f}",
                            f"{r['dice']:.6f}", f"{r['msd_px']:.6f}", f"{r['msd_mm']:.6f}",
                            r["n"], r["n_empty"]])
        write_metrics_csv(Path(out_dir) / "cross_test_samples.csv", per_sample)
    return rows


def benchmark_fps(model_kind: str, batch_size: int = 1, filter_base: int | None = None,
                  input_extent: int = 128, warmup: int = 2, passes: int = 10) -> dict:
    """Median-of-passes inference throughput plus the size columns.

    The fps figure is hardware-dependent and is reported, never asserted
    against any fixed value.
    """
    net = build(model_kind, NetConfig(filter_base=filter_base, input_extent=input_extent)).eval()
    x = Tensor(np.random.default_rng(0).random(
        (batch_size, 1, input_extent, input_extent)).astype(np.float32))
    times = []
    with no_grad():
        for _ in range(warmup):
            net.forward(x)
        for _ in range(max(passes, 10)):
            t0 = time.perf_counter()
            net.forward(x)
            times.append(time.perf_counter() - t0)
    med = float(np.median(times))
    return {
        "kind": model_kind,
        "params": count_params(net),
        "memory_bytes": memory_bytes(net),
        "fps": batch_size / med,
    }


def bench_table(kinds=KINDS, batch_size: int = 1, filter_base: int | None = None,
                input_extent: int = 128, out_dir=None) -> list:
    rows = [benchmark_fps(k, batch_size, filter_base, input_extent) for k in kinds]
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "bench.csv", "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(["kind", "params", "memory_bytes", "fps"])
            for r in rows:
                w.writerow([r["kind"], r["params"], r["memory_bytes"], f"{r['fps']:.2f}"])
    return rows


def write_report(out_dir) -> Path:
    """Collate every CSV artifact in a run directory into one markdown
    summary."""
    out_dir = Path(out_dir)
    sections = []
    for path in sorted(out_dir.glob("*.csv")):
        with open(path, encoding="utf-8") as f:
            rows = list(csv.reader(f))
        if not rows:
            continue
        lines = [f"## {path.name}", ""]
        lines.append("| " + " | ".join(rows[0]) + " |")
        lines.append("|" + "---|" * len(rows[0]))
        for row in rows[1:]:
            lines.append("| " + " | ".join(row) + " |")
        sections.append("\n".join(lines))
    report = out_dir / "report.md"
    body = "# Run report\n\n" + "\n\n".join(sections) + "\n"
    report.write_text(body, encoding="utf-8")
    return report


def config_from_file(path) -> dict:
    """Parse a key = value config file (UTF-8, # comments) into kwargs
    for ExperimentConfig. Hyphenated keys are accepted."""
    text = Path(path).read_text(encoding="utf-8")
    known = {f.name: f for f in fields(ExperimentConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        key = key.lower().replace("-", "_")
        if key == "profile":
            if val not in PROFILES:
                raise ValueError(f"{path}:{lineno}: unknown profile {val!r}")
            out.update(PROFILES[val])
            continue
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(known[key], val)
    return out


def _coerce(fld, val: str):
    text = fld.type
    if val.lower() in ("none", "") and "None" in text:
        return None
    if "int" in text:
        return int(val)
    if "float" in text:
        return float(val)
    return val
