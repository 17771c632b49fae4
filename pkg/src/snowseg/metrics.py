"""Evaluation protocol: confusion matrix, per-class IoU, reports, timing.

Scores are computed from one aggregate confusion matrix over the whole
evaluation set, never averaged per image. A class whose TP+FP+FN is zero
over the entire set (it appears in neither ground truth nor prediction)
scores NaN rather than 0; a class that was predicted but never labelled
scores 0, because its false positives make the union positive. The mean
IoU averages the non-NaN entries only.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import ClassTable, LabelMap
from .errors import DataError, DimensionError, EvaluationError, ParseError


@dataclass
class ConfusionMatrix:
    """C x C pixel tally; counts[g][p] = pixels of true class g predicted p."""

    counts: np.ndarray

    def __init__(self, num_classes: int | None = None, counts: np.ndarray | None = None):
        if counts is None:
            if num_classes is None or num_classes < 1:
                raise DimensionError("ConfusionMatrix needs a positive class count")
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise DimensionError(f"counts must be square, got shape {counts.shape}")
        if (counts < 0).any():
            raise DataError("confusion counts must be non-negative")
        self.counts = counts

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(counts=self.counts.copy())

    def accumulate(self, gt: LabelMap, pred: LabelMap) -> "ConfusionMatrix":
        """Tally every pixel pair into the matrix; returns self."""
        gt = np.asarray(gt)
        pred = np.asarray(pred)
        if gt.shape != pred.shape:
            raise DimensionError(
                f"ground truth shape {gt.shape} does not match prediction {pred.shape}")
        c = self.num_classes
        for name, arr in (("ground truth", gt), ("prediction", pred)):
            if arr.size and (arr.min() < 0 or arr.max() >= c):
                raise DataError(f"{name} contains class ids outside [0, {c})")
        flat = c * gt.reshape(-1).astype(np.int64) + pred.reshape(-1)
        self.counts += np.bincount(flat, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Entrywise sum; associative and commutative, so shards can merge."""
        if other.num_classes != self.num_classes:
            raise DimensionError(
                f"cannot merge {other.num_classes}-class into {self.num_classes}-class matrix")
        return ConfusionMatrix(counts=self.counts + other.counts)


def tp_fp_fn(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(cm.counts)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    return tp, fp, fn


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """tp / (tp + fp + fn) per class; NaN where that union is empty."""
    tp, fp, fn = tp_fp_fn(cm)
    union = tp + fp + fn
    out = np.full(cm.num_classes, np.nan)
    present = union > 0
    out[present] = tp[present] / union[present]
    return out


def mean_iou(per_class: np.ndarray) -> float:
    """Arithmetic mean over the defined (non-NaN) classes."""
    values = np.asarray(per_class, dtype=np.float64)
    mask = ~np.isnan(values)
    if not mask.any():
        raise EvaluationError("all classes are NaN; the evaluation set is empty")
    return float(values[mask].mean())


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    """Fraction of pixels on the matrix diagonal."""
    total = cm.total
    if total == 0:
        raise EvaluationError("confusion matrix is empty")
    return float(np.trace(cm.counts) / total)


@dataclass(frozen=True)
class ClassScore:
    id: int
    name: str
    tp: int
    fp: int
    fn: int
    iou: float  # NaN when tp+fp+fn == 0


@dataclass(frozen=True)
class IoUReport:
    per_class: tuple[ClassScore, ...]
    mean_iou: float
    pixel_accuracy: float
    pred_time_s: float | None = None


def build_report(cm: ConfusionMatrix, class_table: ClassTable,
                 pred_time_s: float | None = None) -> IoUReport:
    if len(class_table) != cm.num_classes:
        raise DimensionError(
            f"class table has {len(class_table)} names for a "
            f"{cm.num_classes}-class matrix")
    tp, fp, fn = tp_fp_fn(cm)
    iou = iou_per_class(cm)
    rows = tuple(
        ClassScore(i, class_table.names[i], int(tp[i]), int(fp[i]), int(fn[i]), float(iou[i]))
        for i in range(cm.num_classes)
    )
    return IoUReport(rows, mean_iou(iou), pixel_accuracy(cm), pred_time_s)


def _fmt(value: float) -> str:
    return "nan" if np.isnan(value) else repr(float(value))


def write_report(report: IoUReport, path) -> None:
    """CSV: per-class rows under a fixed header, then summary footer rows."""
    lines = ["class_id,class_name,tp,fp,fn,iou"]
    for row in report.per_class:
        lines.append(f"{row.id},{row.name},{row.tp},{row.fp},{row.fn},{_fmt(row.iou)}")
    lines.append(f"mean_iou,{_fmt(report.mean_iou)}")
    lines.append(f"pixel_accuracy,{_fmt(report.pixel_accuracy)}")
    if report.pred_time_s is not None:
        lines.append(f"pred_time_s,{_fmt(report.pred_time_s)}")
    Path(path).write_text("\n".join(lines) + "\n", "utf-8")


def write_report_json(report: IoUReport, path) -> None:
    """JSON mirror of the CSV; undefined IoU is null, absent timing is omitted."""
    doc = {
        "classes": [
            {
                "id": row.id, "name": row.name,
                "tp": row.tp, "fp": row.fp, "fn": row.fn,
                "iou": None if np.isnan(row.iou) else row.iou,
            }
            for row in report.per_class
        ],
        "mean_iou": report.mean_iou,
        "pixel_accuracy": report.pixel_accuracy,
    }
    if report.pred_time_s is not None:
        doc["pred_time_s"] = report.pred_time_s
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", "utf-8")


def read_report(path) -> IoUReport:
    """Parse a CSV written by :func:`write_report`."""
    lines = Path(path).read_text("utf-8").splitlines()
    if not lines or lines[0] != "class_id,class_name,tp,fp,fn,iou":
        raise ParseError(f"{path}: not an IoU report (bad header)")
    rows: list[ClassScore] = []
    footer: dict[str, float] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) == 6:
            cid, name, tp, fp, fn, iou = parts
            rows.append(ClassScore(int(cid), name, int(tp), int(fp), int(fn), float(iou)))
        elif len(parts) == 2:
            footer[parts[0]] = float(parts[1])
        else:
            raise ParseError(f"{path}:{lineno}: unrecognized row {line!r}")
    if "mean_iou" not in footer or "pixel_accuracy" not in footer:
        raise ParseError(f"{path}: missing summary footer")
    return IoUReport(tuple(rows), footer["mean_iou"], footer["pixel_accuracy"],
                     footer.get("pred_time_s"))


def average_seconds_per_image(times: list[float]) -> float:
    """Arithmetic mean of per-image wall-clock seconds."""
    if not times:
        raise EvaluationError("no prediction times recorded")
    return float(sum(times) / len(times))


def bench_prediction(forward_fn, images) -> tuple[list[float], float]:
    """Time forward_fn on each pre-loaded image, one at a time.

    Disk I/O and metric bookkeeping stay outside the timed region; only the
    forward call is measured.
    """
    images = list(images)
    if not images:
        raise EvaluationError("benchmark needs at least one sample")
    times = []
    for image in images:
        start = time.perf_counter()
        forward_fn(image)
        times.append(time.perf_counter() - start)
    return times, average_seconds_per_image(times)
