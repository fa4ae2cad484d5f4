"""Command line front end.

Verbs: train, sweep, repeats, test, cross-test, bench, synth, report.
Experiment settings resolve in precedence order: built-in defaults,
then --config file entries (key = value, UTF-8, # comments), then
--profile, then explicit flags.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import generate_synthetic, load_pairs, save_dataset
from .harness import (
    LR_GRID,
    METRIC_NAMES,
    PROFILES,
    ExperimentConfig,
    bench_table,
    config_from_file,
    cross_test,
    lr_sweep,
    predict,
    run_repeats,
    run_training,
    write_report,
)
from .nets import KINDS
from .postprocess import DEFAULT_MM_PER_PX, evaluate, write_metrics_csv

# maps CLI flag destinations onto ExperimentConfig fields
_FLAG_FIELDS = {
    "kind": "model_kind",
    "lr": "learning_rate",
    "batch": "batch_size",
    "epochs": "epochs",
    "iterations": "iterations_per_epoch",
    "augmentation": "augmentation",
    "train": "train_dir",
    "val": "val_dir",
    "seed": "seed",
    "repeats": "repeats",
    "dropout": "dropout_rate",
    "mm_per_px": "px_to_mm_factor",
    "filter_base": "filter_base",
    "kernel": "kernel_size",
    "extent": "input_extent",
}


def _experiment_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--kind", choices=KINDS, help="network architecture")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--batch", type=int, help="mini-batch size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--iterations", type=int, help="iterations per epoch")
    p.add_argument("--augmentation", choices=("online", "offline", "none"))
    p.add_argument("--train", help="training data directory")
    p.add_argument("--val", help="validation data directory")
    p.add_argument("--repeats", type=int, help="number of repeated runs")
    p.add_argument("--dropout", type=float, help="dropout rate")
    p.add_argument("--mm-per-px", dest="mm_per_px", type=float,
                   help="pixel to millimetre factor")
    p.add_argument("--filter-base", dest="filter_base", type=int,
                   help="width of the first filter bank")
    p.add_argument("--kernel", type=int, help="convolution kernel size")
    p.add_argument("--extent", type=int, help="input image extent")
    p.add_argument("--profile", choices=sorted(PROFILES),
                   help="named epoch/iteration preset")
    return p


def _common_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory", default="runs")
    return p


def _build_config(args) -> ExperimentConfig:
    kwargs = {}
    if args.config:
        kwargs.update(config_from_file(args.config))
    if getattr(args, "profile", None):
        kwargs.update(PROFILES[args.profile])
    for flag, fld in _FLAG_FIELDS.items():
        val = getattr(args, flag, None)
        if val is not None:
            kwargs[fld] = val
    if "model_kind" not in kwargs:
        raise ValueError("no network chosen: pass --kind or set model-kind in --config")
    return ExperimentConfig(**kwargs)


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    print("epoch,train_loss,val_loss,train_dice,val_dice")
    rec = run_training(cfg, out_dir=args.out, echo=True)
    print(f"status: {rec.status}")
    if rec.status == "ok":
        print(f"best_val_loss: {rec.best_val_loss:.6f}")
        print(f"best_val_dice: {rec.best_val_dice:.6f}")
        print(f"last_val_loss: {rec.last_val_loss:.6f}")
        print(f"last_val_dice: {rec.last_val_dice:.6f}")
        print(f"checkpoint: {rec.checkpoint_path}")
    print(f"wall_time_s: {rec.wall_time:.1f}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _build_config(args)
    lrs = tuple(float(v) for v in args.lrs.split(",")) if args.lrs else LR_GRID
    rows = lr_sweep(cfg, lrs, out_dir=args.out)
    print("lr,best_train_loss,best_val_loss,status")
    for r in rows:
        if r["status"] == "ok":
            print(f"{r['lr']:g},{r['best_train_loss']:.6f},{r['best_val_loss']:.6f},ok")
        else:
            print(f"{r['lr']:g},N/A,N/A,N/A")
    return 0


def _cmd_repeats(args) -> int:
    cfg = _build_config(args)
    out = run_repeats(cfg, out_dir=args.out)
    print(f"runs_ok: {out['n_ok']}/{cfg.repeats}")
    print("metric,mean,std")
    for m in METRIC_NAMES:
        mean, std = out["metrics"][m]
        print(f"{m},{mean:.6f},{std:.6f}")
    return 0


def _cmd_test(args) -> int:
    ds = load_pairs(args.data)
    extent = ds.samples[0].image.shape[0]
    net = load_checkpoint(args.checkpoint, input_extent=extent)
    factor = args.mm_per_px if args.mm_per_px is not None else DEFAULT_MM_PER_PX
    out_extent = net.output_extent
    off = (extent - out_extent) // 2
    preds = predict(net, ds)
    rows = []
    for s, pred in zip(ds.samples, preds):
        truth = s.mask[off : off + out_extent, off : off + out_extent]
        rows.append((s.id, evaluate(pred, truth, factor)))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    write_metrics_csv(csv_path, rows)
    ok = [rep for _, rep in rows if rep.status == "ok"]
    bce = float(np.mean([rep.bce for _, rep in rows]))
    dice = float(np.mean([rep.dice for _, rep in rows]))
    print(f"samples: {len(rows)} ({len(rows) - len(ok)} empty-contour)")
    print(f"mean_bce: {bce:.6f}")
    print(f"mean_dice: {dice:.6f}")
    if ok:
        print(f"mean_msd_px: {float(np.mean([r.msd_px for r in ok])):.6f}")
        print(f"mean_msd_mm: {float(np.mean([r.msd_mm for r in ok])):.6f}")
    print(f"wrote: {csv_path}")
    return 0


def _cmd_cross_test(args) -> int:
    ckpts = [c for c in args.checkpoints.split(",") if c]
    sets = {}
    for item in args.data.split(","):
        if not item:
            continue
        name, _, path = item.rpartition("=")
        if not name:
            name = Path(path).name
        sets[name] = path
    factor = args.mm_per_px if args.mm_per_px is not None else DEFAULT_MM_PER_PX
    rows = cross_test(ckpts, sets, factor=factor, out_dir=args.out)
    print("checkpoint,test_set,bce,dice,msd_px,msd_mm,n,n_empty")
    for r in rows:
        print(f"{r['checkpoint']},{r['test_set']},{r['bce']:.6f},{r['dice']:.6f},"
              f"{r['msd_px']:.6f},{r['msd_mm']:.6f},{r['n']},{r['n_empty']}")
    return 0


def _cmd_bench(args) -> int:
    kinds = KINDS if args.kinds == "all" else tuple(args.kinds.split(","))
    rows = bench_table(kinds, batch_size=args.batch or 1,
                       filter_base=args.filter_base,
                       input_extent=args.extent or 128,
                       out_dir=args.out)
    print("kind,params,memory_bytes,fps")
    for r in rows:
        print(f"{r['kind']},{r['params']},{r['memory_bytes']},{r['fps']:.2f}")
    return 0


def _cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    ds = generate_synthetic(args.count, rng, style=args.style)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def _cmd_report(args) -> int:
    path = write_report(args.out)
    print(f"wrote: {path}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.data, ui_dir=args.ui)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def main(argv=None) -> int:
    common = _common_parent()
    exp = _experiment_parent()
    parser = argparse.ArgumentParser(
        prog="contourforge",
        description="contour segmentation toolkit: training, evaluation, data",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    sub.add_parser("train", parents=[common, exp],
                   help="train one model").set_defaults(fn=_cmd_train)

    p = sub.add_parser("sweep", parents=[common, exp],
                       help="train once per learning rate")
    p.add_argument("--lrs", help="comma-separated learning rates (default: the published grid)")
    p.set_defaults(fn=_cmd_sweep)

    sub.add_parser("repeats", parents=[common, exp],
                   help="repeat a run and aggregate mean/std").set_defaults(fn=_cmd_repeats)

    p = sub.add_parser("test", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--mm-per-px", dest="mm_per_px", type=float)
    p.set_defaults(fn=_cmd_test)

    p = sub.add_parser("cross-test", parents=[common],
                       help="evaluate checkpoints across test sets")
    p.add_argument("--checkpoints", required=True, help="comma-separated checkpoint paths")
    p.add_argument("--data", required=True,
                   help="comma-separated name=dir test sets (name defaults to the dir name)")
    p.add_argument("--mm-per-px", dest="mm_per_px", type=float)
    p.set_defaults(fn=_cmd_cross_test)

    p = sub.add_parser("bench", parents=[common], help="inference throughput table")
    p.add_argument("--kinds", default="all", help='"all" or comma-separated kinds')
    p.add_argument("--batch", type=int)
    p.add_argument("--filter-base", dest="filter_base", type=int)
    p.add_argument("--extent", type=int)
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--style", choices=("a", "b"), default="a")
    p.set_defaults(fn=_cmd_synth)

    sub.add_parser("report", parents=[common],
                   help="collate run CSVs into report.md").set_defaults(fn=_cmd_report)

    p = sub.add_parser("serve", help="run the annotation HTTP service")
    p.add_argument("--data", required=True, help="frame directory")
    p.add_argument("--ui", help="static UI bundle directory")
    p.add_argument("--port", type=int, default=8077)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(fn=_cmd_serve)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
