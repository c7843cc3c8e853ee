"""Command line entry point: ``dendrite-cascade <command> ...``.

Exit codes: 0 ok, 2 configuration, 3 I/O, 4 training, 5 checkpoint,
6 data, 7 a ``--check`` assertion failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config, write_config_echo
from .cpdn import load_model, save_model
from .errors import (CheckpointError, ConfigurationError, DataError, TrainingError)
from .evaluation import (ABLATION_LABELS, CROP_SIZES, INTENSITY_MODES, ablation_run, cascade_detector,
                         crop_size_sweep, evaluate_dataset, intensity_sweep,
                         metrics_from_counts, read_count_fixture, write_counts_csv,
                         write_metrics_csv, write_per_image_csv, write_sweep_csv)
from .hsr import load_hsr, save_hsr
from .pipeline import run_pipeline, train_cascade
from .synthgen import generate_dataset, load_split, read_annotations, read_png

log = logging.getLogger("dendrite_cascade")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRAIN, EXIT_CHECKPOINT, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4, 5, 6, 7
MODEL_FILES = {"d1": "d1.ckpt", "d2": "d2.ckpt", "hsr": "hsr.ckpt"}


class CheckFailed(Exception):
    pass


# -- helpers -----------------------------------------------------------------

def _resolve_config(args, models_dir=None) -> RunConfig:
    """--config wins; otherwise the echo saved next to the models; otherwise defaults."""
    if args.config:
        cfg = load_config(args.config)
    elif models_dir is not None and (Path(models_dir) / "config.txt").exists():
        cfg = load_config(Path(models_dir) / "config.txt")
    else:
        cfg = RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "paper_epochs", False):
        cfg = cfg.with_paper_epochs()
    return cfg.with_values(overrides) if overrides else cfg


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_models(models_dir):
    root = Path(models_dir)
    missing = [f for f in MODEL_FILES.values() if not (root / f).exists()]
    if missing:
        raise CheckpointError(f"{root}: missing {', '.join(missing)}")
    return load_model(root / "d1.ckpt"), load_model(root / "d2.ckpt"), load_hsr(root / "hsr.ckpt")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _truncate4(x):
    return f"{np.floor(x * 10000) / 10000:.4f}"


def _print_report(label, r):
    print(f"{label}: total={r.total_gt} tp={r.t_positive} fp={r.f_positive} "
          f"recall={r.recall:.6f} precision={r.precision:.6f} fscore={r.fscore:.6f}")


def _plots():
    # matplotlib is slow to import; only pay for it when a figure is drawn
    from . import plots
    return plots


# -- commands ----------------------------------------------------------------

def cmd_synth(args):
    cfg = _resolve_config(args)
    out = _out_dir(args.out)
    manifest = generate_dataset(cfg.synth, args.count, out)
    write_config_echo(cfg, out)
    sizes = {k: len(v) for k, v in manifest["split"].items()}
    print(f"wrote {args.count} samples to {out} "
          f"(train {sizes['train']}, val {sizes['val']}, test {sizes['test']})")
    flags = Counter()
    for name in sum(manifest["split"].values(), []):
        flags.update(read_annotations(out / "annotations" / f"{name}.csv")[1])
    print("cores by flag: " + ", ".join(f"{k}={flags[k]}" for k in sorted(flags)))
    return EXIT_OK


def cmd_train(args):
    cfg = _resolve_config(args)
    train = load_split(args.data, "train")
    val = load_split(args.data, "val")
    if not train:
        raise DataError(f"{args.data}: empty training split")
    out = _out_dir(args.out)
    write_config_echo(cfg, out)

    resumed = {}
    if args.resume:
        if (out / "d1.ckpt").exists():
            resumed["d1"] = load_model(out / "d1.ckpt")
        if "d1" in resumed and (out / "d2.ckpt").exists():
            resumed["d2"] = load_model(out / "d2.ckpt")
        if "d2" in resumed and (out / "hsr.ckpt").exists():
            resumed["hsr"] = load_hsr(out / "hsr.ckpt")
        if resumed:
            print("resuming with " + ", ".join(sorted(resumed)))

    def on_stage(stage, model, stage_log):
        if stage == "hsr":
            save_hsr(model, out / MODEL_FILES[stage])
            _write_rows(out / "loss_hsr.csv", ["epoch", "loss", "accuracy"],
                        [[i + 1, f"{l:.8f}", f"{a:.6f}"] for i, (l, a) in enumerate(stage_log)])
        else:
            save_model(model, out / MODEL_FILES[stage])
            _write_rows(out / f"loss_{stage}.csv", ["epoch", "loss"],
                        [[i + 1, f"{v:.8f}"] for i, v in enumerate(stage_log)])
        print(f"{stage}: trained, final loss {stage_log[-1] if stage != 'hsr' else stage_log[-1][0]:.6f}"
              if stage_log else f"{stage}: trained (0 epochs)")

    def on_epoch(stage, epoch, *values):
        log.info("%s epoch %d: %s", stage, epoch, " ".join(f"{v:.6f}" for v in values))

    models = train_cascade(train, val, cfg.pipeline, cfg.arch, cfg.train, cfg.sampler,
                           d1=resumed.get("d1"), d2=resumed.get("d2"), hsr=resumed.get("hsr"),
                           on_stage=on_stage, on_epoch=on_epoch)
    summary = {k: v for k, v in models.logs.items() if not isinstance(v, list)}
    _write_rows(out / "train_summary.csv", ["key", "value"],
                [[k, f"{v:.6f}"] for k, v in sorted(summary.items())])
    if not args.no_plots:
        curves = {}
        for stage in ("d1", "d2", "hsr"):
            path = out / f"loss_{stage}.csv"
            if path.exists():
                with open(path, newline="") as fh:
                    curves[stage] = [float(r["loss"]) for r in csv.DictReader(fh)]
        _plots().plot_loss_curves(out / "loss_curves.png", curves)
    print(f"models written to {out}")
    return EXIT_OK


def _detect_inputs(args):
    """Yield ``(name, image, gt_points or None)``."""
    if args.data:
        for s in load_split(args.data, args.split):
            yield s.name, s.image, s.cores
    for path in args.images or []:
        path = Path(path)
        gt = None
        if args.annotations:
            ann = Path(args.annotations) / f"{path.stem}.csv"
            if ann.exists():
                gt = read_annotations(ann)[0]
        yield path.stem, read_png(path), gt


def cmd_detect(args):
    d1, d2, hsr = _load_models(args.models)
    cfg = _resolve_config(args, args.models)
    out = _out_dir(args.out)
    write_config_echo(cfg, out)
    plots = _plots()
    count = 0
    for name, image, gt in _detect_inputs(args):
        res = run_pipeline(image, d1, d2, hsr, cfg.pipeline)
        target = _out_dir(out / name)
        _write_rows(target / "pred.csv", ["row", "col", "stage"],
                    [[r, c, stage] for (r, c), stage in res.tagged_points()])
        plots.save_overlay(target / "overlay.png", image, gt or (), res.esd_points, res.hsd_points,
                           res.rejected_points)
        plots.save_heatmap(target / "raw_h1.png", res.raw_h1, vmax=1.0)
        plots.save_heatmap(target / "bin_h1.png", res.bin_h1, vmax=1.0)
        plots.save_heatmap(target / "image_i2.png", res.image_i2[0], vmax=1.0)
        plots.save_heatmap(target / "raw_h2.png", res.raw_h2, vmax=1.0)
        plots.save_heatmap(target / "refined_h2.png", res.refined_h2, vmax=1.0)
        plots.save_heatmap(target / "merged.png", res.merged, vmax=1.0)
        count += 1
        print(f"{name}: {len(res.esd_points)} esd, {len(res.hsd_points)} hsd, "
              f"{len(res.rejected_points)} rejected")
    if count == 0:
        raise DataError("no input images given (use --data or image paths)")
    return EXIT_OK


def cmd_eval(args):
    if args.fixture:
        rows = read_count_fixture(args.fixture)
        if not rows:
            raise DataError(f"{args.fixture}: no count rows")
        reports = [(label, metrics_from_counts(total, tp, fp)) for label, total, tp, fp in rows]
        for label, r in reports:
            _print_report(label, r)
            print(f"  4dp: recall={_truncate4(r.recall)} precision={_truncate4(r.precision)} "
                  f"fscore={_truncate4(r.fscore)}")
        if args.out:
            out = _out_dir(args.out)
            write_counts_csv(out / "fixture_metrics.csv", reports)
        return EXIT_OK

    if not args.models or not args.data:
        raise ConfigurationError("eval needs --models and --data (or --fixture)")
    d1, d2, hsr = _load_models(args.models)
    cfg = _resolve_config(args, args.models)
    samples = load_split(args.data, args.split)
    report, per_image = evaluate_dataset(samples, cascade_detector(d1, d2, hsr, cfg.pipeline),
                                         cfg.pipeline.deviation)
    _print_report(args.split, report)
    if args.out:
        out = _out_dir(args.out)
        write_config_echo(cfg, out)
        write_metrics_csv(out / "metrics.csv", report)
        write_per_image_csv(out / "per_image.csv", per_image)
    return EXIT_OK


def _parse_settings(kind, values):
    if kind == "crop":
        if not values:
            return CROP_SIZES
        return tuple(None if v.lower() == "none" else int(v.lower().split("x")[0]) for v in values)
    return tuple(values) if values else INTENSITY_MODES


def cmd_sweep(args):
    cfg = _resolve_config(args, args.models)
    d1 = load_model(Path(args.models) / "d1.ckpt")
    train = load_split(args.data, "train")
    test = load_split(args.data, args.split)
    if not train:
        raise DataError(f"{args.data}: empty training split")
    try:
        settings = _parse_settings(args.kind, args.settings)
    except ValueError as exc:
        raise ConfigurationError(f"bad sweep setting: {exc}") from exc
    out = _out_dir(args.out)
    write_config_echo(cfg, out)

    def on_setting(label, metrics, d2):
        _print_report(label, metrics)

    sweep = crop_size_sweep if args.kind == "crop" else intensity_sweep
    report = sweep(train, test, d1, cfg.arch, cfg.pipeline, cfg.train, settings, on_setting)
    write_sweep_csv(out / f"sweep_{args.kind}.csv", report.rows)
    write_counts_csv(out / f"sweep_{args.kind}_counts.csv", report.rows)
    if not args.no_plots:
        _plots().plot_sweep(out / f"sweep_{args.kind}.png", report.rows, title=f"{args.kind} sweep")
    return EXIT_OK


def cmd_ablate(args):
    d1, d2, hsr = _load_models(args.models)
    cfg = _resolve_config(args, args.models)
    samples = load_split(args.data, args.split)
    if not samples:
        raise DataError(f"{args.data}: split {args.split!r} is empty")
    results = ablation_run(samples, d1, d2, hsr, cfg.pipeline)
    rows = [(label, results[label]) for label in ABLATION_LABELS]
    for label, r in rows:
        _print_report(label, r)
    if args.out:
        out = _out_dir(args.out)
        write_config_echo(cfg, out)
        write_sweep_csv(out / "ablation.csv", rows)
        write_counts_csv(out / "ablation_counts.csv", rows)
        if not args.no_plots:
            _plots().plot_ablation(out / "ablation.png", rows)
    if args.check and results["+HSD"].recall < results["ESD"].recall:
        raise CheckFailed(f"recall dropped when adding the hard stage: "
                          f"{results['ESD'].recall:.6f} -> {results['+HSD'].recall:.6f}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="dendrite-cascade",
                                     description="Two-stage dendrite core detector with patch refinement.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train", help="train D1, D2 and the refiner"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--paper-epochs", action="store_true", help="use 100/100/50 epochs")
    p.add_argument("--resume", action="store_true", help="reuse finished stage checkpoints in --out")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("detect", help="run the cascade on images"))
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset directory; detects on --split")
    p.add_argument("--split", default="test")
    p.add_argument("--annotations", help="directory of <stem>.csv ground truth for image paths")
    p.add_argument("images", nargs="*")
    p.set_defaults(func=cmd_detect)

    p = common(sub.add_parser("eval", help="score the cascade on a split"))
    p.add_argument("--models")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.add_argument("--fixture", help="CSV of setting,total,tp,fp rows to score directly")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("sweep", help="crop-size or fill-intensity sweep (retrains D2)"))
    p.add_argument("kind", choices=("crop", "intensity"))
    p.add_argument("--models", required=True, help="directory holding d1.ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--settings", nargs="+", help="crop sizes (none, 40, 80x80, ...) or intensity modes")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = common(sub.add_parser("ablate", help="ESD / +HSD / +HSR comparison"))
    p.add_argument("--models", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.add_argument("--check", action="store_true", help="exit 7 if the hard stage lowers recall")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
