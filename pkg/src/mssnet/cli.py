"""Operator-facing commands: train, eval, predict, ablate, plot-distance,
bench.  Every command is deterministic under a fixed seed; reports land as
CSV tables with a rendered figure alongside.

Exit codes: 0 success, 1 runtime failure, 2 usage/configuration error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import run_benchmark
from .configfile import ExperimentConfig, apply_overrides, parse_config_file
from .data import (
    KITTI_CLASS_NAMES,
    S3DIS_CLASS_NAMES,
    S3DIS_TRAIN_AREAS,
    S3DIS_VAL_AREAS,
    KITTI_TRAIN_SEQUENCES,
    KITTI_VAL_SEQUENCES,
    AugmentationConfig,
    kitti_features,
    list_kitti_scans,
    list_s3dis_rooms,
    load_kitti_scan,
    load_s3dis_room,
    s3dis_features,
    save_predictions_kitti,
    synthetic_family,
    synthetic_features,
)
from .errors import ConfigurationError, MssnetError
from .losses import LossWeights
from .metrics import MetricReport
from .network import build_network, load_checkpoint, save_checkpoint
from .plotting import (
    plot_ablation,
    plot_bench,
    plot_distance_miou,
    plot_iou_bars,
    plot_loss_curve,
)
from .sparse import devoxelize, voxelize
from .trainer import TrainConfig, Trainer, evaluate


def _print_versions():
    print(
        f"mssnet {__version__} (python {sys.version.split()[0]}, "
        f"numpy {np.__version__})",
        file=sys.stderr,
    )


def _load_experiment(args) -> ExperimentConfig:
    values = parse_config_file(args.config) if args.config else {}
    if getattr(args, "dataset", None):
        values["dataset"] = args.dataset
    if getattr(args, "data_root", None):
        values["data_root"] = args.data_root
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    apply_overrides(values, getattr(args, "set", None))
    return ExperimentConfig.from_dict(values)


def _dataset_scenes(cfg: ExperimentConfig, split: str):
    """Returns (scenes, feature_fn, class_names) for one split."""
    if cfg.dataset == "synthetic":
        if split == "train":
            scenes = synthetic_family(
                cfg.synth_train_scenes, cfg.synth_points, cfg.synth_seed
            )
        else:
            scenes = synthetic_family(
                cfg.synth_val_scenes, cfg.synth_points, cfg.synth_seed + 10_000
            )
        names = [f"class_{i}" for i in range(cfg.num_classes)]
        return scenes, lambda c: synthetic_features(c, cfg.synth_features), names

    if cfg.data_root is None or not Path(cfg.data_root).exists():
        raise ConfigurationError(
            f"dataset root does not exist: {cfg.data_root!r} "
            f"(set data_root in the config or pass --data-root)"
        )
    if cfg.dataset == "kitti":
        sequences = KITTI_TRAIN_SEQUENCES if split == "train" else KITTI_VAL_SEQUENCES
        pairs = list_kitti_scans(cfg.data_root, sequences)
        if cfg.max_scenes:
            pairs = pairs[: cfg.max_scenes]
        if not pairs:
            raise ConfigurationError(
                f"no scans found under {cfg.data_root}/sequences for {sequences}"
            )
        scenes = [load_kitti_scan(b, l) for b, l in pairs]
        fn = lambda c: kitti_features(c, cfg.kitti_feature_channels)
        return scenes, fn, KITTI_CLASS_NAMES

    areas = S3DIS_TRAIN_AREAS if split == "train" else S3DIS_VAL_AREAS
    rooms = list_s3dis_rooms(cfg.data_root, areas)
    if cfg.max_scenes:
        rooms = rooms[: cfg.max_scenes]
    if not rooms:
        raise ConfigurationError(
            f"no rooms found under {cfg.data_root} for areas {areas}"
        )
    return [load_s3dis_room(r) for r in rooms], s3dis_features, S3DIS_CLASS_NAMES


def _out_dir(args, default: str) -> Path:
    out = Path(getattr(args, "out_dir", None) or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_report(report: MetricReport):
    width = max(len(n) for n in report.class_names)
    print(f"{'class'.ljust(width)}  iou")
    for name, iou in report.rows():
        print(f"{name.ljust(width)}  {'-' if iou is None else f'{iou:.4f}'}")
    print(f"mIoU                {report.miou:.4f}")
    print(f"overall accuracy    {report.overall_accuracy:.4f}")
    print(f"mean class accuracy {report.mean_class_accuracy:.4f}")


def _write_report_csv(report: MetricReport, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "iou"])
        for name, iou in report.rows():
            writer.writerow([name, "" if iou is None else f"{iou:.6f}"])
        writer.writerow(["miou", f"{report.miou:.6f}"])
        writer.writerow(["overall_accuracy", f"{report.overall_accuracy:.6f}"])
        writer.writerow(["mean_class_accuracy", f"{report.mean_class_accuracy:.6f}"])


def _build_trainer(cfg: ExperimentConfig, net, scenes, feature_fn) -> Trainer:
    aug = None
    if cfg.augment:
        aug = AugmentationConfig(
            scale_range=cfg.scale_range,
            translation_range=cfg.translation_range,
            jitter_sigma=cfg.jitter_sigma,
        )
    weights = (
        LossWeights(cfg.w_ce, cfg.w_lovasz)
        if cfg.w_lovasz > 0
        else LossWeights(cfg.w_ce, 0.0)
    )
    return Trainer(
        net=net,
        scenes=scenes,
        feature_fn=feature_fn,
        config=TrainConfig(
            lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
            epochs=cfg.epochs, batch_size=cfg.batch_size,
            schedule=cfg.schedule, seed=cfg.seed,
        ),
        voxel_size=cfg.voxel_size,
        loss_weights=weights,
        augmentation=aug,
    )


def _train_and_eval(cfg: ExperimentConfig, seed: int):
    """One full training run; returns (net, trainer, report)."""
    net = build_network(cfg.network_config(), seed=seed)
    scenes, feature_fn, class_names = _dataset_scenes(cfg, "train")
    trainer = _build_trainer(cfg, net, scenes, feature_fn)
    trainer.run(max_steps=cfg.max_steps)
    val_scenes, _, _ = _dataset_scenes(cfg, "val")
    report = evaluate(net, val_scenes, feature_fn, cfg.voxel_size, class_names)
    return net, trainer, report


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    net = build_network(cfg.network_config(), seed=cfg.seed)
    if args.dry_run:
        print(f"network parameters: {net.num_parameters()}")
        print(f"parameter tensors:  {len(net.parameters())}")
        return 0
    out = _out_dir(args, "mssnet_train_out")
    scenes, feature_fn, class_names = _dataset_scenes(cfg, "train")
    trainer = _build_trainer(cfg, net, scenes, feature_fn)
    trainer.run(
        max_steps=cfg.max_steps,
        progress=lambda s: print(
            f"epoch {s.epoch}: mean loss {s.mean_loss:.4f} ({s.steps} steps)"
        ),
    )
    trainer.write_log(out / "train_log.csv")
    plot_loss_curve(trainer.history, out / "loss_curve.png")
    save_checkpoint(
        out / "checkpoint.ckpt", net,
        meta={"experiment": cfg.to_dict(), "steps": trainer.global_step},
    )
    val_scenes, _, _ = _dataset_scenes(cfg, "val")
    report = evaluate(net, val_scenes, feature_fn, cfg.voxel_size, class_names)
    _print_report(report)
    _write_report_csv(report, out / "metrics.csv")
    plot_iou_bars(report.class_names, report.iou, report.miou, out / "iou_bars.png")
    print(f"artifacts written to {out}")
    return 0


def _experiment_from_checkpoint(meta: dict, args) -> ExperimentConfig:
    values = dict(meta.get("experiment", {}))
    if getattr(args, "data_root", None):
        values["data_root"] = args.data_root
    return ExperimentConfig.from_dict(values)


def cmd_eval(args) -> int:
    net, meta = load_checkpoint(args.checkpoint)
    cfg = _experiment_from_checkpoint(meta, args)
    scenes, feature_fn, class_names = _dataset_scenes(cfg, args.split)
    report = evaluate(net, scenes, feature_fn, cfg.voxel_size, class_names)
    _print_report(report)
    out = _out_dir(args, "mssnet_eval_out")
    _write_report_csv(report, out / "metrics.csv")
    plot_iou_bars(report.class_names, report.iou, report.miou, out / "iou_bars.png")
    return 0


def cmd_predict(args) -> int:
    net, meta = load_checkpoint(args.checkpoint)
    cloud = load_kitti_scan(args.scan)
    width = net.config.in_channels
    if width not in (3, 4):
        raise ConfigurationError(
            f"checkpoint expects {width} input channels; scan prediction "
            f"supports the 3- or 4-channel feature layout"
        )
    feats = kitti_features(cloud, channels=width)
    vox = voxelize(cloud.positions, feats, cloud.labels, meta
                   .get("experiment", {}).get("voxel_size", 0.05))
    net.eval()
    logits = net.forward(vox.tensor).features.data
    point_preds = devoxelize(logits.argmax(axis=1), vox.point_to_voxel)
    save_predictions_kitti(point_preds, args.out)
    print(f"wrote {len(point_preds)} labels to {args.out}")
    return 0


ABLATION_ROWS = [
    # (name, use_mffm, use_acffm, use_lovasz) following the ablation matrix
    ("baseline", False, False, False),
    ("+mffm", True, False, False),
    ("+acffm", False, True, False),
    ("+mffm+acffm", True, True, False),
    ("+mffm+acffm+lovasz", True, True, True),
]


def run_ablation(cfg: ExperimentConfig) -> list[dict]:
    rows = []
    for name, use_mffm, use_acffm, use_lovasz in ABLATION_ROWS:
        values = cfg.to_dict()
        values.update(
            use_mffm=use_mffm, use_acffm=use_acffm,
            w_lovasz=1.0 if use_lovasz else 0.0,
        )
        row_cfg = ExperimentConfig.from_dict(values)
        _, _, report = _train_and_eval(row_cfg, seed=row_cfg.seed)
        rows.append({
            "name": name,
            "mffm": use_mffm,
            "acffm": use_acffm,
            "lovasz": use_lovasz,
            "miou": report.miou,
            "overall_accuracy": report.overall_accuracy,
        })
    return rows


def cmd_ablate(args) -> int:
    cfg = _load_experiment(args)
    out = _out_dir(args, "mssnet_ablate_out")
    rows = run_ablation(cfg)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    plot_ablation(rows, out / "ablation.png")
    print(f"{'variant':<20} {'mffm':<5} {'acffm':<6} {'lovasz':<7} {'miou':<8} oa")
    for r in rows:
        print(
            f"{r['name']:<20} {str(r['mffm']):<5} {str(r['acffm']):<6} "
            f"{str(r['lovasz']):<7} {r['miou']:<8.4f} {r['overall_accuracy']:.4f}"
        )
    print(f"artifacts written to {out}")
    return 0


def cmd_plot_distance(args) -> int:
    net, meta = load_checkpoint(args.checkpoint)
    cfg = _experiment_from_checkpoint(meta, args)
    edges = [float(v) for v in args.bins.split(",")]
    scenes, feature_fn, class_names = _dataset_scenes(cfg, args.split)
    report = evaluate(
        net, scenes, feature_fn, cfg.voxel_size, class_names,
        distance_bin_edges=edges,
    )
    bins = report.extras["distance_bins"]
    out = _out_dir(args, "mssnet_distance_out")
    with open(out / "miou_by_distance.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["range_lo_m", "range_hi_m", "points", "miou"])
        for b in bins:
            writer.writerow([b.lo, b.hi, b.count, f"{b.miou:.6f}"])
    plot_distance_miou(bins, out / "miou_by_distance.png")
    print("range_lo range_hi points miou")
    for b in bins:
        print(f"{b.lo:<8g} {b.hi:<8g} {b.count:<6d} {b.miou:.4f}")
    return 0


def cmd_bench(args) -> int:
    counts = [int(v) for v in args.points.split(",")]
    rows = run_benchmark(counts, num_queries=args.queries, seed=args.seed or 0)
    out = _out_dir(args, "mssnet_bench_out")
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    plot_bench(rows, out / "bench.png")
    header = f"{'points':>9} {'voxels':>9} {'voxelize_s':>11} {'kmap_s':>9} {'conv_s':>9} {'hash_us/q':>10} {'kdtree_s':>9}"
    print(header)
    for r in rows:
        print(
            f"{r['points']:>9d} {r['voxels']:>9d} {r['voxelize_s']:>11.3f} "
            f"{r['kernel_map_s']:>9.3f} {r['conv_forward_s']:>9.3f} "
            f"{r['hash_query_us']:>10.3f} {r['kdtree_total_s']:>9.3f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mssnet",
        description="Multi-scale sparse-convolution point cloud segmentation",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a network")
    train.add_argument("--config", help="experiment config file (key = value)")
    train.add_argument("--dataset", choices=["synthetic", "kitti", "s3dis"])
    train.add_argument("--data-root")
    train.add_argument("--out-dir")
    train.add_argument("--seed", type=int)
    train.add_argument("--dry-run", action="store_true",
                       help="build the network and print its size, no training")
    train.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--split", choices=["train", "val"], default="val")
    ev.add_argument("--data-root")
    ev.add_argument("--out-dir")
    ev.add_argument("--seed", type=int)
    ev.set_defaults(func=cmd_eval)

    pred = sub.add_parser("predict", help="label one KITTI scan")
    pred.add_argument("checkpoint")
    pred.add_argument("scan")
    pred.add_argument("--out", required=True)
    pred.add_argument("--seed", type=int)
    pred.set_defaults(func=cmd_predict)

    abl = sub.add_parser("ablate", help="run the 5-row ablation matrix")
    abl.add_argument("--config")
    abl.add_argument("--dataset", choices=["synthetic", "kitti", "s3dis"])
    abl.add_argument("--data-root")
    abl.add_argument("--out-dir")
    abl.add_argument("--seed", type=int)
    abl.add_argument("--set", action="append", metavar="KEY=VALUE")
    abl.set_defaults(func=cmd_ablate)

    dist = sub.add_parser("plot-distance", help="mIoU by horizontal range")
    dist.add_argument("checkpoint")
    dist.add_argument("--bins", default="0,10,20,30,50")
    dist.add_argument("--split", choices=["train", "val"], default="val")
    dist.add_argument("--data-root")
    dist.add_argument("--out-dir")
    dist.add_argument("--seed", type=int)
    dist.set_defaults(func=cmd_plot_distance)

    bench = sub.add_parser("bench", help="hash vs kd-tree timing table")
    bench.add_argument("--points", default="10000,100000,1000000")
    bench.add_argument("--queries", type=int, default=10_000)
    bench.add_argument("--out-dir")
    bench.add_argument("--seed", type=int)
    bench.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _print_versions()
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MssnetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
