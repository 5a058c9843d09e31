"""Per-class accuracy/F1/IoU from argmax maps, and cross-fold aggregation.

Metrics are one-vs-rest per class over the argmax of prediction and truth
maps (ties to the lowest class index). A cross-validation report carries
artery, vein, and average rows in percent, each as mean +/- population
standard deviation across folds, mirroring how such results are tabulated.
Background is counted internally but excluded from the report rows.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import ShapeError, Tensor

CLASS_NAMES = ("artery", "background", "vein")
METRIC_NAMES = ("accuracy", "f1", "iou")
REPORT_ROWS = ("artery", "vein", "average")


@dataclass
class ConfusionCounts:
    """One-vs-rest TP/FP/FN/TN pixel counts per class."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @staticmethod
    def zeros(num_classes: int = 3) -> "ConfusionCounts":
        z = lambda: np.zeros(num_classes, dtype=np.int64)
        return ConfusionCounts(z(), z(), z(), z())

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def confusion(pred, truth) -> ConfusionCounts:
    """Counts from a 3xSxS probability map against a 3xSxS one-hot truth."""
    p = _as_array(pred)
    t = _as_array(truth)
    if p.shape != t.shape or p.ndim != 3:
        raise ShapeError(f"confusion: shapes {list(p.shape)} and {list(t.shape)} must be "
                         "equal 3-D class maps")
    num_classes = p.shape[0]
    p_idx = p.argmax(axis=0)
    t_idx = t.argmax(axis=0)
    counts = ConfusionCounts.zeros(num_classes)
    total = p_idx.size
    for c in range(num_classes):
        pred_c = p_idx == c
        true_c = t_idx == c
        counts.tp[c] = np.count_nonzero(pred_c & true_c)
        counts.fp[c] = np.count_nonzero(pred_c & ~true_c)
        counts.fn[c] = np.count_nonzero(~pred_c & true_c)
        counts.tn[c] = total - counts.tp[c] - counts.fp[c] - counts.fn[c]
    return counts


def per_class_metrics(counts: ConfusionCounts) -> dict[int, dict[str, float]]:
    """Accuracy, F1, IoU in [0, 1] per class index.

    A class absent from both maps (TP+FP+FN = 0) scores f1 = iou = 1: there
    was nothing to get wrong.
    """
    out = {}
    for c in range(len(counts.tp)):
        tp, fp, fn, tn = (int(counts.tp[c]), int(counts.fp[c]),
                          int(counts.fn[c]), int(counts.tn[c]))
        total = tp + fp + fn + tn
        accuracy = (tp + tn) / total if total else 1.0
        if tp + fp + fn == 0:
            f1 = iou = 1.0
        else:
            f1 = 2 * tp / (2 * tp + fp + fn)
            iou = tp / (tp + fp + fn)
        out[c] = {"accuracy": accuracy, "f1": f1, "iou": iou}
    return out


@dataclass
class FoldReport:
    """Cross-validation table: per-fold percents and mean +/- std rows."""

    # rows[row][metric] = (mean, population std), in percent
    rows: dict[str, dict[str, tuple[float, float]]]
    # per_fold[fold][row][metric] = percent
    per_fold: list[dict[str, dict[str, float]]]
    fold_test_counts: list[int] = field(default_factory=list)

    @property
    def num_folds(self) -> int:
        return len(self.per_fold)


def aggregate_report(
    per_fold_metrics: Sequence[Mapping[int, Mapping[str, float]]],
    fold_test_counts: Sequence[int] | None = None,
) -> FoldReport:
    """Build the artery/vein/average table from per-fold class metrics.

    ``per_fold_metrics[fold]`` maps class index -> metric -> value in [0, 1]
    (as returned by per_class_metrics). The average row is the artery/vein
    mean within each fold, then mean +/- std across folds like the others.
    """
    if not per_fold_metrics:
        raise ValueError("need at least one fold")
    per_fold: list[dict[str, dict[str, float]]] = []
    for fold in per_fold_metrics:
        entry: dict[str, dict[str, float]] = {"artery": {}, "vein": {}, "average": {}}
        for metric in METRIC_NAMES:
            artery = 100.0 * fold[0][metric]
            vein = 100.0 * fold[2][metric]
            entry["artery"][metric] = artery
            entry["vein"][metric] = vein
            entry["average"][metric] = (artery + vein) / 2.0
        per_fold.append(entry)

    rows: dict[str, dict[str, tuple[float, float]]] = {}
    for row in REPORT_ROWS:
        rows[row] = {}
        for metric in METRIC_NAMES:
            values = np.array([fold[row][metric] for fold in per_fold])
            rows[row][metric] = (float(values.mean()), float(values.std()))
    return FoldReport(rows=rows, per_fold=per_fold,
                      fold_test_counts=list(fold_test_counts or []))


def report_to_csv(report: FoldReport) -> str:
    """Serialize as CSV: mean+/-std columns followed by raw per-fold columns."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["row"] + list(METRIC_NAMES)
    for metric in METRIC_NAMES:
        header += [f"{metric}_fold{i}" for i in range(report.num_folds)]
    writer.writerow(header)
    for row in REPORT_ROWS:
        record = [row]
        for metric in METRIC_NAMES:
            mean, std = report.rows[row][metric]
            record.append(f"{mean:.3f}±{std:.3f}")
        for metric in METRIC_NAMES:
            record += [f"{report.per_fold[i][row][metric]:.6f}"
                       for i in range(report.num_folds)]
        writer.writerow(record)
    return buf.getvalue()


def report_to_text(report: FoldReport) -> str:
    """Serialize as flat key=value lines."""
    lines = [f"folds={report.num_folds}"]
    if report.fold_test_counts:
        lines.append("fold_test_counts=" + ",".join(str(c) for c in report.fold_test_counts))
    for row in REPORT_ROWS:
        for metric in METRIC_NAMES:
            mean, std = report.rows[row][metric]
            lines.append(f"{row}.{metric}.mean={mean:.6f}")
            lines.append(f"{row}.{metric}.std={std:.6f}")
    return "\n".join(lines) + "\n"


def format_table(report: FoldReport) -> str:
    """Human-readable artery/vein/average table with mean +/- std cells."""
    width = 18
    lines = ["".join(["row".ljust(10)] + [m.ljust(width) for m in METRIC_NAMES])]
    for row in REPORT_ROWS:
        cells = [row.ljust(10)]
        for metric in METRIC_NAMES:
            mean, std = report.rows[row][metric]
            cells.append(f"{mean:.3f}±{std:.3f}".ljust(width))
        lines.append("".join(cells))
    return "\n".join(lines)
