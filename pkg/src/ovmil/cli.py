"""Command-line entry point: preprocess, train, tune, evaluate, compare, heatmap.

Exit codes: 0 success, 1 runtime failure, 2 I/O failure, 64 usage or config error.

Configuration resolves in this order, later sources winning: built-in defaults,
the preset (``--preset`` or ``preset=`` in the config file), the ``--config``
key=value file, then explicit command-line flags.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import plots
from .abmil import DivergenceError, forward, read_checkpoint
from .config import (
    HYPERPARAMETERS,
    PRESETS,
    ConfigError,
    TrainConfig,
    get_preset,
    parse_value,
    read_kv,
    write_kv,
)
from .features import FeatureStoreError, load_manifest, read_feature_bag
from .heatmap import HeatmapSpec, render_heatmap, write_heatmap
from .orchestrate import (
    CrossValidation,
    ScheduleError,
    iteration_best_losses,
    load_schedule,
    run_experiment,
    run_tuning,
    write_trace,
)
from .preprocess import (
    AugmentParams,
    LabStats,
    MacenkoReference,
    augment_copies,
    downsample,
    fit_macenko_reference,
    macenko_normalise,
    patch_grid,
    reinhard_normalise,
    segment_tissue_fixed,
    segment_tissue_otsu,
    segmentation_preview,
)
from .stats import (
    METRICS,
    MetricError,
    compare_folds,
    metric_report,
    read_predictions,
    write_comparison,
    write_report,
)

log = logging.getLogger("ovmil")

EXIT_OK, EXIT_RUNTIME, EXIT_IO, EXIT_USAGE = 0, 1, 2, 64

TRAIN_FIELDS = HYPERPARAMETERS + ("max_epochs",)
RUN_KEYS = {"seed", "workers", "out", "preset", "manifest", "holdout", "schedule", "grids", "command"}


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config resolution --------------------------------------------------------

def resolve(args, command):
    """Merge defaults, preset, config file and flags into (TrainConfig, run settings)."""
    file_kv = {}
    if getattr(args, "config", None):
        if not Path(args.config).is_file():
            raise UsageError(f"--config: no such file {args.config}")
        file_kv = read_kv(args.config)
    unknown = set(file_kv) - RUN_KEYS - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise UsageError(f"config file: unknown keys {', '.join(sorted(unknown))}")

    run = {}
    for key in RUN_KEYS:
        flag = getattr(args, key, None)
        if flag not in (None, []):
            run[key] = flag
        elif key in file_kv:
            run[key] = file_kv[key]
    try:
        run["seed"] = int(run.get("seed", 0))
        run["workers"] = int(run.get("workers", os.cpu_count() or 1))
    except ValueError as exc:
        raise UsageError(f"seed/workers: {exc}") from None
    if run["workers"] < 1:
        raise UsageError("--workers must be >= 1")

    preset = run.get("preset")
    base = get_preset(preset) if preset else TrainConfig()
    overrides = {k: v for k, v in file_kv.items() if k in TrainConfig.__dataclass_fields__}
    for name in TRAIN_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    problems = []
    parsed = {}
    for k, v in overrides.items():
        try:
            parsed[k] = parse_value(k, v) if isinstance(v, str) else v
        except ConfigError as exc:
            problems.append(str(exc))
    if problems:
        raise UsageError("; ".join(problems))
    parsed["seed"] = run["seed"]
    try:
        config = base.replace(**parsed)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    return config, run


def echo_config(path, config, run, extra=None):
    kv = {"command": run.get("command", "")}
    for key in sorted(run):
        if key in ("command", "workers"):
            continue
        value = run[key]
        if isinstance(value, (list, tuple)):
            value = " ".join(str(v) for v in value)
        kv[key] = str(value)
    if config is not None:
        kv.update(config.to_kv())
    kv.update(extra or {})
    write_kv(kv, path)


def require_file(path, flag):
    if path is None:
        raise UsageError(f"{flag} is required")
    if not Path(path).is_file():
        raise UsageError(f"{flag}: no such file {path}")
    return Path(path)


def parse_holdouts(items):
    if isinstance(items, str):
        items = items.split()
    out = {}
    for spec in items or []:
        if "=" not in spec:
            raise UsageError(f"--holdout expects NAME=PATH, got {spec!r}")
        name, path = spec.split("=", 1)
        out[name] = require_file(path, "--holdout")
    return out


# -- commands ----------------------------------------------------------------

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff"}


def _input_images(path):
    path = Path(path)
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if path.is_file():
        return [path]
    raise InputError(f"input {path} does not exist")


def _read_rgb(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise InputError(f"{path}: {exc}") from None


def _save_png(array, path):
    Image.fromarray(array).save(path)


def cmd_preprocess(args):
    out = Path(args.output)
    images = _input_images(args.input)
    run = {"command": "preprocess", "mode": args.mode, "input": args.input, "seed": args.seed}
    if not images:
        log.warning("no images found in %s", args.input)
        print(f"warning: no images found in {args.input}", file=sys.stderr)
        out.mkdir(parents=True, exist_ok=True)
        echo_config(out / "preprocess_config.kv", None, run)
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)

    reference = None
    if args.mode == "normalise":
        if args.reference:
            ref_tile = _read_rgb(require_file(args.reference, "--reference"))
            reference = LabStats.of(ref_tile) if args.method == "reinhard" else fit_macenko_reference(ref_tile)
        elif args.method == "reinhard":
            raise UsageError("reinhard normalisation needs --reference")
        else:
            reference = MacenkoReference()
    params = AugmentParams(args.brightness, args.contrast, args.saturation, args.hue, args.seed)

    failures = []
    for path in images:
        try:
            tile = _read_rgb(path)
            stem = path.stem
            if args.mode == "segment":
                if args.otsu:
                    mask, t = segment_tissue_otsu(tile, args.otsu_offset, args.median)
                else:
                    t = args.threshold
                    mask = segment_tissue_fixed(tile, t, args.median)
                _save_png(mask.astype(np.uint8) * 255, out / f"{stem}_mask.png")
                _save_png(segmentation_preview(tile, mask), out / f"{stem}_preview.png")
                summary = f"threshold={t} tissue_fraction={mask.mean():.4f}"
                if args.patch_px:
                    coords = patch_grid(mask, args.patch_px, args.stride_px or args.patch_px,
                                        args.min_tissue)
                    np.savetxt(out / f"{stem}_coords.csv", np.array(coords, dtype=int).reshape(-1, 2),
                               fmt="%d", delimiter=",", header="x,y", comments="")
                    summary += f" patches={len(coords)}"
            elif args.mode == "normalise":
                if args.method == "reinhard":
                    result = reinhard_normalise(tile, reference)
                else:
                    result = macenko_normalise(tile, reference)
                _save_png(result, out / f"{stem}_{args.method}.png")
                summary = f"method={args.method}"
            elif args.mode == "augment":
                for k, copy in enumerate(augment_copies(tile, params, args.copies)):
                    _save_png(copy, out / f"{stem}_aug{k:02d}.png")
                summary = f"copies={args.copies}"
            else:
                _save_png(downsample(tile, args.factor), out / f"{stem}_ds{args.factor}.png")
                summary = f"factor={args.factor}"
            print(f"{path.name}: ok {summary}")
        except InputError as exc:
            failures.append((path, str(exc), EXIT_IO))
        except ValueError as exc:
            failures.append((path, str(exc), EXIT_RUNTIME))
    echo_config(out / "preprocess_config.kv", None, {**run, **{
        k: v for k, v in vars(args).items() if k not in ("func", "input", "output") and v is not None
    }})
    for path, msg, _ in failures:
        print(f"{path.name}: FAILED {msg}", file=sys.stderr)
    if failures:
        return max(code for *_, code in failures)
    return EXIT_OK


def _load_records(path):
    try:
        return load_manifest(path)
    except OSError as exc:
        raise InputError(str(exc)) from None


def cmd_train(args):
    config, run = resolve(args, "train")
    run["command"] = "train"
    manifest = require_file(run.get("manifest"), "--manifest")
    holdouts = parse_holdouts(run.get("holdout"))
    out = _out_dir(run)
    records = _load_records(manifest)
    held = {name: _load_records(p) for name, p in holdouts.items()}
    result = run_experiment(records, config, run["seed"], out, held, run["workers"])
    echo_config(out / "config.kv", config, {**run, "manifest": manifest,
                                            "holdout": [f"{k}={v}" for k, v in holdouts.items()]})
    plots.plot_loss_curves(result.histories, out / "loss_curves.png")
    print(f"trained {len(result.models)} fold models -> {out}")
    return EXIT_OK


def cmd_tune(args):
    base, run = resolve(args, "tune")
    run["command"] = "tune"
    manifest = require_file(run.get("manifest"), "--manifest")
    schedule_path = run.get("schedule")
    grids_path = run.get("grids")
    if schedule_path:
        require_file(schedule_path, "--schedule")
    if grids_path:
        require_file(grids_path, "--grids")
    try:
        schedule = load_schedule(schedule_path, grids_path)
    except (ScheduleError, ConfigError) as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(run)
    records = _load_records(manifest)
    scorer = CrossValidation.from_records(records, run["seed"], run["workers"])
    final, trace = run_tuning(schedule, scorer, base)
    write_trace(trace, out / "tuning_trace.csv")
    write_kv(final.to_kv(), out / "tuned_config.kv")
    echo_config(out / "config.kv", base, {**run, "manifest": manifest})
    plots.plot_tuning_losses(iteration_best_losses(trace), out / "tuning_losses.png")
    print(f"tuned over {len(schedule.iterations)} iterations, {len(trace)} evaluations -> {out}")
    return EXIT_OK


def cmd_evaluate(args):
    run = {"command": "evaluate", "seed": args.seed, "bootstrap": args.bootstrap,
           "method": "percentile", "ci": "95"}
    if args.bootstrap < 1:
        raise UsageError("--bootstrap must be >= 1")
    paths = [require_file(p, "--predictions") for p in args.predictions]
    workers = args.workers or os.cpu_count() or 1
    out = Path(args.out) if args.out else paths[0].parent
    out.mkdir(parents=True, exist_ok=True)
    for path in paths:
        preds = read_predictions(path)
        estimates = metric_report(preds, args.bootstrap, args.seed, workers=workers)
        stem = path.stem.replace("predictions_", "")
        write_report(out / f"report_{stem}.csv", estimates)
        plots.plot_metric_report(estimates, out / f"report_{stem}.png", title=stem)
        for e in estimates:
            print(f"{path.name} {e.metric}: {e.point:.4f} (mean {e.boot_mean:.4f}, "
                  f"95% CI {e.ci_low:.4f}-{e.ci_high:.4f})")
    echo_config(out / "evaluate_config.kv", None,
                {**run, "predictions": " ".join(str(p) for p in paths)})
    return EXIT_OK


def _fold_metrics(run_dir, metrics):
    run_dir = Path(run_dir)
    fold_files = sorted(run_dir.glob("fold*/predictions_test.csv"))
    if not fold_files:
        raise InputError(f"{run_dir}: no fold*/predictions_test.csv files")
    values = {m: [] for m in metrics}
    for f in fold_files:
        preds = read_predictions(f)
        for m in metrics:
            values[m].append(METRICS[m](preds))
    return values


def cmd_compare(args):
    if len(args.runs) < 2:
        raise UsageError("compare needs at least two run directories")
    for r in args.runs:
        if not Path(r).is_dir():
            raise UsageError(f"run directory {r} does not exist")
    metrics = list(METRICS) if args.metric == "all" else [args.metric]
    per_fold = {}
    for r in args.runs:
        name = Path(r).name or str(r)
        while name in per_fold:
            name += "'"
        per_fold[name] = _fold_metrics(r, metrics)
    lengths = {len(v[metrics[0]]) for v in per_fold.values()}
    if len(lengths) != 1:
        raise InputError("runs have different numbers of folds")
    rows = compare_folds(per_fold, metrics)
    out = Path(args.out) if args.out else Path(args.runs[0])
    out.mkdir(parents=True, exist_ok=True)
    write_comparison(out / "comparison.csv", rows)
    echo_config(out / "compare_config.kv", None,
                {"command": "compare", "runs": " ".join(map(str, args.runs)), "metric": args.metric,
                 "correction": "benjamini-hochberg", "test": "paired-t two-sided"})
    for pair, metric, t, p, q in rows:
        print(f"{pair} {metric}: t={t:.4f} p={p:.4g} p_adj={q:.4g}")
    return EXIT_OK


def cmd_heatmap(args):
    ckpt = require_file(args.checkpoint, "--checkpoint")
    bag_path = require_file(args.bag, "--bag")
    try:
        params, _ = read_checkpoint(ckpt)
        bag = read_feature_bag(bag_path)
    except OSError as exc:
        raise InputError(str(exc)) from None
    patch = bag.patch_size_px
    spec = HeatmapSpec(
        patch_px=patch,
        stride_px=args.stride_px or patch,
        downsample=args.downsample,
        normalisation=args.normalisation,
        opacity=args.opacity,
    )
    if args.slide_dims:
        dims = tuple(args.slide_dims)
    else:
        c = bag.coords.astype(np.int64)
        dims = (int(c[:, 0].max()) + patch, int(c[:, 1].max()) + patch)
    background = _read_rgb(require_file(args.background, "--background")) if args.background else None
    _, attention, _ = forward(bag.features, params)
    image = render_heatmap(bag.coords, attention, dims, spec, background)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = out / f"heatmap_{bag.slide_id}.png"
    write_heatmap(target, image, bag.slide_id, attention, spec)
    echo_config(out / "heatmap_config.kv", None, {
        "command": "heatmap", "checkpoint": ckpt, "bag": bag_path,
        "slide_dims": f"{dims[0]}x{dims[1]}", "downsample": spec.downsample,
        "normalisation": spec.normalisation, "opacity": spec.opacity,
    })
    print(f"{bag.slide_id}: {bag.n_patches} patches -> {target}")
    return EXIT_OK


def _out_dir(run):
    if not run.get("out"):
        raise UsageError("--out is required")
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- parser ------------------------------------------------------------------

def _global_flags(p, out_required=False):
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--workers", type=int, default=None, help="worker processes (default: CPU count)")
    p.add_argument("--out", default=None, required=out_required, help="output directory")
    p.add_argument("--config", default=None, help="key=value config file")


def _train_flags(p):
    p.add_argument("--manifest", default=None)
    p.add_argument("--preset", default=None, choices=sorted(PRESETS), metavar="NAME",
                   help="built-in final hyperparameters, e.g. rn50, uni, h-optimus-0")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--lr-decay-patience", dest="lr_decay_patience", type=int)
    p.add_argument("--lr-decay-factor", dest="lr_decay_factor", type=float)
    p.add_argument("--model-size", dest="model_size", type=str, help="M1,M2 e.g. 512,128")
    p.add_argument("--dropout", dest="dropout_p", type=float)
    p.add_argument("--max-patches", dest="max_patches", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)


def build_parser():
    parser = Parser(prog="ovmil", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("preprocess", help="segment, normalise, augment or downsample PNG tiles")
    p.add_argument("input", help="PNG file or directory of tiles")
    p.add_argument("output", help="output directory")
    p.add_argument("--mode", required=True, choices=["segment", "normalise", "augment", "downsample"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=int, default=8, help="saturation threshold on 0..255")
    p.add_argument("--otsu", action="store_true", help="per-tile Otsu threshold instead of fixed")
    p.add_argument("--otsu-offset", type=int, default=0)
    p.add_argument("--median", type=int, default=0, help="median filter size for the mask (0 = off)")
    p.add_argument("--patch-px", type=int, default=0, help="also emit patch grid coordinates")
    p.add_argument("--stride-px", type=int, default=0)
    p.add_argument("--min-tissue", type=float, default=0.5)
    p.add_argument("--method", choices=["reinhard", "macenko"], default="macenko")
    p.add_argument("--reference", default=None, help="reference tile for normalisation targets")
    p.add_argument("--copies", type=int, default=5)
    p.add_argument("--brightness", type=float, default=0.25)
    p.add_argument("--contrast", type=float, default=0.25)
    p.add_argument("--saturation", type=float, default=0.25)
    p.add_argument("--hue", type=float, default=0.04)
    p.add_argument("--factor", type=int, default=4)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="five-fold cross-validated training with ensembled hold-outs")
    _global_flags(p)
    _train_flags(p)
    p.add_argument("--holdout", action="append", default=[], metavar="NAME=MANIFEST")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="iterative grid search over the tuning schedule")
    _global_flags(p)
    _train_flags(p)
    p.add_argument("--schedule", default=None, help="schedule CSV (default: shipped 17-iteration plan)")
    p.add_argument("--grids", default=None, help="candidate grids key=value file")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("evaluate", help="bootstrap metric reports from prediction CSVs")
    p.add_argument("--predictions", nargs="+", required=True)
    p.add_argument("--bootstrap", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="paired t-tests across folds with BH-FDR correction")
    p.add_argument("runs", nargs="+")
    p.add_argument("--metric", default="all", choices=["all", *METRICS])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("heatmap", help="render attention heatmap for one feature bag")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bag", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slide-dims", type=int, nargs=2, metavar=("W", "H"))
    p.add_argument("--downsample", type=int, default=16)
    p.add_argument("--stride-px", type=int, default=0)
    p.add_argument("--normalisation", choices=["percentile", "minmax"], default="percentile")
    p.add_argument("--opacity", type=float, default=0.5)
    p.add_argument("--background", default=None, help="thumbnail PNG to blend over")
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ovmil {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, FeatureStoreError, OSError) as exc:
        print(f"ovmil {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, MetricError, ValueError) as exc:
        print(f"ovmil {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
