"""Command-line pipeline: synth, gen-gt, train, adapt, eval, plot.

Exit codes:
    0  success
    2  bad arguments (argparse)
    3  bad input data (malformed files, invalid configs, shape mismatches)
    4  training divergence
    5  I/O failure (missing files, unwritable outputs)

Set HACCN_DETERMINISTIC=1 to force deterministic mode everywhere. All
randomness is controlled by --seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, evaluation, formats, plotting
from .adaptation import AdaptConfig, Aggregation, adapt
from .density import (
    ClassBoundaries,
    DensityMap,
    derive_segmentation_mask,
    downsample_density_map,
    generate_density_map,
)
from .formats import FormatError
from .model import ablation_config, apply_determinism, load_checkpoint, save_checkpoint
from .synthdata import PRESETS, SceneSpec, generate_dataset, load_dataset
from .training import TrainConfig, TrainingDivergence, load_train_config, train

EXIT_OK = 0
EXIT_BAD_ARGS = 2
EXIT_BAD_DATA = 3
EXIT_DIVERGED = 4
EXIT_IO = 5


def _hash_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _hash_input(path) -> str:
    """Digest of a file, or of a dataset directory via its manifest."""
    p = Path(path)
    if p.is_dir():
        for name in ("manifest.json", "annotations.json"):
            if (p / name).exists():
                return _hash_file(p / name)
        return "unhashed-directory"
    return _hash_file(p)


def _write_run_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                        inputs: dict[str, str], outputs: list[str],
                        started: float, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "seed": getattr(args, "seed", None),
        "input_hashes": {k: _hash_input(v) for k, v in inputs.items()},
        "outputs": sorted(outputs),
        "wall_clock_s": round(time.monotonic() - started, 3),
    }
    if extra:
        manifest.update(extra)
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1, default=str))


def cmd_synth(args) -> int:
    started = time.monotonic()
    spec = PRESETS[args.preset]
    overrides = {}
    if args.size is not None:
        overrides["size"] = args.size
    if args.count_min is not None or args.count_max is not None:
        lo, hi = spec.count_range
        overrides["count_range"] = (
            lo if args.count_min is None else args.count_min,
            hi if args.count_max is None else args.count_max,
        )
    if args.background is not None:
        overrides["background"] = args.background
    spec = dataclasses.replace(spec, **overrides)
    out = Path(args.out)
    generate_dataset(out, args.n, spec, args.seed)
    _write_run_manifest(out, "synth", args, {}, ["images/", "annotations.json",
                                                "labels.json", "manifest.json"], started)
    print(f"wrote {args.n} images to {out}")
    return EXIT_OK


def cmd_gen_gt(args) -> int:
    started = time.monotonic()
    if args.sigma <= 0:
        raise ValueError("--sigma must be positive")
    if args.seg_threshold < 0:
        raise ValueError("--seg-threshold must be non-negative")
    if args.downsample < 1:
        raise ValueError("--downsample must be a positive integer")
    records = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for rec in records:
        dmap = generate_density_map(rec.annotation, args.sigma)
        if args.downsample > 1:
            dmap = downsample_density_map(dmap, args.downsample)
        mask = derive_segmentation_mask(dmap, args.seg_threshold)
        dpath, mpath = out / f"{rec.image_id}.dmap", out / f"{rec.image_id}.smsk"
        formats.write_density_map(dpath, dmap)
        formats.write_segmentation_mask(mpath, mask)
        outputs += [dpath.name, mpath.name]
    _write_run_manifest(out, "gen-gt", args, {"dataset": args.dataset}, outputs, started)
    print(f"wrote density maps and masks for {len(records)} images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.monotonic()
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    overrides = {
        "iterations": args.iterations,
        "learning_rate": args.learning_rate,
        "batch_size": args.batch_size,
        "patch_size": args.patch_size,
        "seed": args.seed,
        "seg_loss_weight": args.seg_loss_weight,
        "val_fraction": args.val_fraction,
    }
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    model_cfg = ablation_config(args.ablation, channel_scale=args.channel_scale)

    records = load_dataset(args.dataset)
    out = Path(args.out)
    result = train(model_cfg, cfg, records, out_dir=out)
    _write_run_manifest(
        out, "train", args, {"dataset": args.dataset},
        ["checkpoint.pt", "history.csv"], started,
        extra={
            "model_config": dataclasses.asdict(model_cfg),
            "train_config": dataclasses.asdict(cfg),
            "best_val_mae": result.best_val_mae,
        },
    )
    final = result.history[-1].total_loss if result.history else float("nan")
    print(f"trained {cfg.iterations} iterations, final loss {final:.6g}, "
          f"best val MAE {result.best_val_mae}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    started = time.monotonic()
    agg = Aggregation(args.agg, r=args.lse_r)
    cfg = AdaptConfig(
        aggregation=agg,
        label_noise=args.label_noise,
        patch_size=args.patch_size or 96,
        seed=args.seed,
        cam_iterations=args.cam_iterations,
        cam_finetune_iterations=args.cam_finetune_iterations,
        count_iterations=args.count_iterations,
    )
    model = load_checkpoint(args.checkpoint)
    source = load_dataset(args.source)
    target = load_dataset(args.target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = adapt(model, source, target, cfg)
    save_checkpoint(out / "adapted.pt", result.model)
    formats.save_priors(out / "priors.json", cfg.boundaries, result.priors)
    (out / "stage_losses.json").write_text(json.dumps(result.stage_losses, indent=1))
    _write_run_manifest(
        out, "adapt", args,
        {"checkpoint": args.checkpoint, "source": args.source, "target": args.target},
        ["adapted.pt", "priors.json", "stage_losses.json"], started,
        extra={"aggregation": dataclasses.asdict(agg)},
    )
    print(f"adapted checkpoint written to {out / 'adapted.pt'}")
    return EXIT_OK


def _parse_bins(raw: str | None) -> list[float] | None:
    if raw is None:
        return None
    edges = [float(v) for v in raw.split(",")]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("--bins must be a strictly increasing comma list")
    return edges


def cmd_eval(args) -> int:
    started = time.monotonic()
    bins_arg = _parse_bins(args.bins)
    model = load_checkpoint(args.checkpoint)
    records = load_dataset(args.dataset)
    results = evaluation.evaluate_dataset(model, records)
    edges = bins_arg or evaluation.quantile_bin_edges(results)
    bins = evaluation.density_level_report(results, edges)

    cross = None
    if args.cross_dataset:
        target_model = load_checkpoint(args.target_checkpoint) if args.target_checkpoint else None
        cross = evaluation.cross_dataset_eval(
            model, target_model, records, require_target=args.target_checkpoint is not None
        )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_report_json(
        out / "report.json", results, bins,
        config=dataclasses.asdict(model.config), cross=cross,
    )
    evaluation.write_bins_csv(out / "density_bins.csv", bins)
    plotting.save_bin_mae_bars(out / "density_bins.png", bins)
    inputs = {"checkpoint": args.checkpoint, "dataset": args.dataset}
    if args.target_checkpoint:
        inputs["target_checkpoint"] = args.target_checkpoint
    _write_run_manifest(out, "eval", args, inputs,
                        ["report.json", "density_bins.csv", "density_bins.png"], started)
    print(f"MAE {evaluation.mae(results):.4f}  MSE {evaluation.mse(results):.4f}  "
          f"({len(results)} images)")
    if cross is not None:
        print(f"cross-dataset MAE S/NS/C: {cross.mae_s}/{cross.mae_ns}/{cross.mae_c}")
    return EXIT_OK


def cmd_plot(args) -> int:
    started = time.monotonic()
    model = load_checkpoint(args.checkpoint)
    records = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    outputs = []
    for rec in records[: args.limit]:
        gt = generate_density_map(rec.annotation, args.sigma)
        gt_small = downsample_density_map(gt, 4)
        pred, count = evaluation.infer_full_image(model, rec.image)
        results.append(evaluation.CountResult(rec.image_id, rec.annotation.count, count))
        panel = out / f"{rec.image_id}_panel.png"
        plotting.save_density_panel(panel, rec.image, gt_small.values, pred.values,
                                    title=rec.image_id)
        outputs.append(panel.name)
    edges = evaluation.quantile_bin_edges(results) if len(results) > 1 else [0.0, 1e9]
    bins = evaluation.density_level_report(results, edges)
    evaluation.write_bins_csv(out / "density_bins.csv", bins)
    plotting.save_bin_mae_bars(out / "density_bins.png", bins)
    outputs += ["density_bins.csv", "density_bins.png"]
    _write_run_manifest(out, "plot", args,
                        {"checkpoint": args.checkpoint, "dataset": args.dataset},
                        outputs, started)
    print(f"wrote {len(outputs)} figure/report files to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowdcount",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--preset", choices=sorted(PRESETS), default="source")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int)
    p.add_argument("--count-min", type=int)
    p.add_argument("--count-max", type=int)
    p.add_argument("--background", choices=("flat", "gradient", "noise-texture"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gen-gt", help="write density maps and masks for a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=4.0)
    p.add_argument("--seg-threshold", type=float, default=1e-3)
    p.add_argument("--downsample", type=int, default=1)
    p.set_defaults(func=cmd_gen_gt)

    p = sub.add_parser("train", help="train a counting model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value train-config file")
    p.add_argument("--ablation", choices=("vgg", "ms", "ms+sam-self", "ms+sam", "full"),
                   default="full")
    p.add_argument("--channel-scale", type=float, default=0.25)
    p.add_argument("--iterations", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--seg-loss-weight", type=float)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="weakly supervised adaptation to a target dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--agg", choices=("gap", "gmp", "lse"), default="lse")
    p.add_argument("--lse-r", type=float, default=4.0)
    p.add_argument("--label-noise", type=float, default=0.15)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--cam-iterations", type=int, default=300)
    p.add_argument("--cam-finetune-iterations", type=int, default=200)
    p.add_argument("--count-iterations", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bins", help="comma-separated density-level bin edges")
    p.add_argument("--cross-dataset", action="store_true",
                   help="emit S/NS/C cross-dataset metrics")
    p.add_argument("--target-checkpoint",
                   help="target-trained checkpoint for the S and C entries")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render density heatmaps and MAE bar charts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=8)
    p.add_argument("--sigma", type=float, default=4.0)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    apply_determinism()
    try:
        return args.func(args)
    except TrainingDivergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FormatError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
