"""Point matching, detection metrics and the experiment drivers.

A prediction is a true positive when it is paired with a ground-truth core
no farther than the deviation distance.  Pairing is a maximum-cardinality
one-to-one matching that, among maximum matchings, minimises the summed
distance.  Counts are pooled over a whole split before the ratios are taken.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigurationError, DataError
from .pipeline import PipelineConfig, run_pipeline, train_hard_stage

METRICS_HEADER = ["total", "tp", "fp", "recall", "precision", "fscore"]
SWEEP_HEADER = ["setting", "recall", "precision", "fscore"]
ABLATION_LABELS = ("ESD", "+HSD", "+HSR")
CROP_SIZES = (None, 40, 60, 80, 100)
INTENSITY_MODES = ("0", "128", "255", "gaussian", "0+gaussian")


@dataclass
class MatchResult:
    pairs: list
    unmatched_gt: list
    unmatched_pred: list


@dataclass(frozen=True)
class MetricsReport:
    total_gt: int
    t_positive: int
    f_positive: int
    recall: float
    precision: float
    fscore: float
    recall_undefined: bool = False

    def row(self):
        return [self.total_gt, self.t_positive, self.f_positive, self.recall, self.precision, self.fscore]


@dataclass
class SweepReport:
    kind: str
    rows: list = field(default_factory=list)

    def add(self, setting, report: MetricsReport):
        if any(r[0] == setting for r in self.rows):
            raise ConfigurationError(f"duplicate sweep setting {setting!r}")
        self.rows.append((setting, report))


def match_points(gt, pred, d):
    """Optimal one-to-one pairing of points within distance ``d`` (inclusive)."""
    gt = [tuple(p) for p in gt]
    pred = [tuple(p) for p in pred]
    if not gt or not pred:
        return MatchResult([], list(range(len(gt))), list(range(len(pred))))
    g = np.asarray(gt, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    dist = np.hypot(g[:, None, 0] - p[None, :, 0], g[:, None, 1] - p[None, :, 1])
    edge = dist <= d
    if not edge.any():
        return MatchResult([], list(range(len(gt))), list(range(len(pred))))
    # one extra edge must outweigh any possible distance total
    big = (float(dist[edge].sum()) + 1.0)
    cost = np.where(edge, dist - big, 0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted((int(r), int(c), float(dist[r, c])) for r, c in zip(rows, cols) if edge[r, c])
    used_g = {r for r, _, _ in pairs}
    used_p = {c for _, c, _ in pairs}
    return MatchResult(pairs,
                       [i for i in range(len(gt)) if i not in used_g],
                       [j for j in range(len(pred)) if j not in used_p])


def metrics_from_counts(total_gt, tp, fp):
    recall_undefined = total_gt == 0
    recall = tp / total_gt if total_gt else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    fscore = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricsReport(int(total_gt), int(tp), int(fp), recall, precision, fscore, recall_undefined)


def exact_metrics(total_gt, tp, fp):
    """Recall, precision, F-score as exact fractions (``None`` where undefined)."""
    r = Fraction(tp, total_gt) if total_gt else None
    p = Fraction(tp, tp + fp) if tp + fp else None
    f = 2 * p * r / (p + r) if r is not None and p is not None and p + r else None
    return r, p, f


def compute_metrics(match: MatchResult):
    total = len(match.pairs) + len(match.unmatched_gt)
    return metrics_from_counts(total, len(match.pairs), len(match.unmatched_pred))


@dataclass
class ImageResult:
    name: str
    total_gt: int
    tp: int
    fp: int


def evaluate_dataset(samples, detector, d=10.0):
    """Micro-averaged metrics of ``detector(sample) -> points`` over ``samples``."""
    if not samples:
        raise DataError("cannot evaluate an empty split")
    per_image = []
    total = tp = fp = 0
    for s in samples:
        m = match_points(s.cores, detector(s), d)
        n_gt = len(s.cores)
        per_image.append(ImageResult(s.name, n_gt, len(m.pairs), len(m.unmatched_pred)))
        total += n_gt
        tp += len(m.pairs)
        fp += len(m.unmatched_pred)
    return metrics_from_counts(total, tp, fp), per_image


def cascade_detector(d1, d2, hsr, config: PipelineConfig, stop_after=None):
    def detect(sample):
        return run_pipeline(sample.image, d1, d2, hsr, config, stop_after).points
    return detect


def ablation_run(samples, d1, d2, hsr, config: PipelineConfig):
    """Metrics of the three cascade prefixes, labelled ESD / +HSD / +HSR."""
    out = {}
    for label, stop in zip(ABLATION_LABELS, ("esd", "hsd", None)):
        out[label] = evaluate_dataset(samples, cascade_detector(d1, d2, hsr, config, stop), config.deviation)[0]
    return out


def crop_setting_label(size):
    return "none" if size is None else f"{int(size)}x{int(size)}"


def crop_config(config: PipelineConfig, size):
    if size is None:
        return replace(config, fill_mode="none")
    if int(size) % 2:
        raise ConfigurationError(f"crop size must be even, got {size}")
    return replace(config, crop_half_size=int(size) // 2,
                   fill_mode="constant" if config.fill_mode == "none" else config.fill_mode)


def intensity_config(config: PipelineConfig, mode):
    mode = str(mode).strip().lower().replace(" ", "")
    if mode == "gaussian":
        return replace(config, fill_mode="gaussian")
    if mode in ("0+gaussian", "constant_plus_boundary_gaussian"):
        return replace(config, fill_mode="constant_plus_boundary_gaussian", fill_value=0.0)
    try:
        level = float(mode)
    except ValueError:
        raise ConfigurationError(f"unknown intensity mode {mode!r}") from None
    if not 0 <= level <= 255:
        raise ConfigurationError(f"intensity must be in [0, 255], got {level}")
    return replace(config, fill_mode="constant", fill_value=level / 255.0)


def _hard_stage_sweep(kind, settings, make_config, label, train, test, d1, arch, config, tc,
                      on_setting=None):
    report = SweepReport(kind)
    for setting in settings:
        cfg = make_config(config, setting)
        d2, _, _ = train_hard_stage(d1, train, arch, cfg, tc)
        metrics, _ = evaluate_dataset(test, cascade_detector(d1, d2, None, cfg, "hsd"), cfg.deviation)
        report.add(label(setting), metrics)
        if on_setting is not None:
            on_setting(label(setting), metrics, d2)
    return report


def crop_size_sweep(train, test, d1, arch, config, tc, sizes=CROP_SIZES, on_setting=None):
    """Retrain D2 for each crop side length (``None`` = no crop) and score easy+hard detection."""
    return _hard_stage_sweep("crop", sizes, crop_config, crop_setting_label,
                             train, test, d1, arch, config, tc, on_setting)


def intensity_sweep(train, test, d1, arch, config, tc, modes=INTENSITY_MODES, on_setting=None):
    """Same as the crop sweep with an 80 x 80 crop and varying fill."""
    base = replace(config, crop_half_size=40)
    return _hard_stage_sweep("intensity", modes, intensity_config, str,
                             train, test, d1, arch, base, tc, on_setting)


def _fmt(x):
    return f"{x:.6f}"


def write_metrics_csv(path, report: MetricsReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerow([report.total_gt, report.t_positive, report.f_positive,
                    _fmt(report.recall), _fmt(report.precision), _fmt(report.fscore)])


def write_sweep_csv(path, rows):
    """``rows`` is an iterable of ``(setting, MetricsReport)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for setting, r in rows:
            w.writerow([setting, _fmt(r.recall), _fmt(r.precision), _fmt(r.fscore)])


def write_counts_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting"] + METRICS_HEADER)
        for setting, r in rows:
            w.writerow([setting, r.total_gt, r.t_positive, r.f_positive,
                        _fmt(r.recall), _fmt(r.precision), _fmt(r.fscore)])


def write_per_image_csv(path, per_image):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "total", "tp", "fp"])
        for r in per_image:
            w.writerow([r.name, r.total_gt, r.tp, r.fp])


def read_count_fixture(path):
    """Rows of ``setting,total,tp,fp`` (``method`` accepted for ``setting``)."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            label = rec.get("setting") or rec.get("method") or f"row{len(rows)}"
            rows.append((label, int(rec["total"]), int(rec["tp"]), int(rec["fp"])))
    return rows


def round4(x):
    """Round half-up to 4 decimals, the convention of published result tables."""
    return math.floor(x * 10000 + 0.5) / 10000
