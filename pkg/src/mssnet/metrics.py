"""Segmentation metrics: confusion matrices, IoU, accuracy, distance bins."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, EmptyInputError
from .losses import IGNORE_LABEL


class ConfusionMatrix:
    """counts[gt, pred] over scored points; ignore-labeled points excluded.

    Matrices are additive: merging worker results is elementwise addition.
    """

    def __init__(self, num_classes: int, ignore_label: int = IGNORE_LABEL):
        if num_classes < 2:
            raise ConfigurationError("need at least 2 classes")
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, preds, labels):
        preds = np.asarray(preds, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        keep = labels != self.ignore_label
        preds, labels = preds[keep], labels[keep]
        if preds.size == 0:
            return self
        if preds.min() < 0 or preds.max() >= self.num_classes:
            raise ConfigurationError("prediction ids out of range")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ConfigurationError("label ids out of range")
        flat = labels * self.num_classes + preds
        self.counts += np.bincount(
            flat, minlength=self.num_classes ** 2
        ).reshape(self.num_classes, self.num_classes)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the class is absent from gt and pred."""
    if cm.total == 0:
        raise EmptyInputError("confusion matrix is empty")
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    return iou


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU plus the mean over classes with non-zero union."""
    iou = per_class_iou(cm)
    return iou, float(np.nanmean(iou))


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptyInputError("confusion matrix is empty")
    return float(np.trace(cm.counts) / cm.total)


def mean_class_accuracy(cm: ConfusionMatrix) -> float:
    """Mean per-class recall over classes present in the ground truth."""
    if cm.total == 0:
        raise EmptyInputError("confusion matrix is empty")
    tp = np.diag(cm.counts).astype(np.float64)
    support = cm.counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support > 0, tp / support, np.nan)
    return float(np.nanmean(recall))


@dataclass
class DistanceBinResult:
    lo: float
    hi: float
    count: int
    miou: float
    iou: np.ndarray


def miou_by_distance(
    points,
    preds,
    labels,
    bin_edges,
    num_classes: int,
    ignore_label: int = IGNORE_LABEL,
) -> list[DistanceBinResult]:
    """mIoU computed independently per horizontal-range bin.

    Points are binned by sqrt(x^2 + y^2) from the sensor origin; empty
    bins are omitted from the result.
    """
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ConfigurationError("bin edges must be strictly increasing")
    points = np.asarray(points, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    ranges = np.hypot(points[:, 0], points[:, 1])

    results = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        mask = (ranges >= lo) & (ranges < hi)
        scored = mask & (labels != ignore_label)
        if not scored.any():
            continue
        cm = ConfusionMatrix(num_classes, ignore_label)
        cm.add(preds[mask], labels[mask])
        iou, mean = miou(cm)
        results.append(DistanceBinResult(float(lo), float(hi), int(scored.sum()), mean, iou))
    return results


@dataclass
class MetricReport:
    """Per-class IoU rows plus summary fields, the shape of a results table."""

    class_names: list[str]
    iou: np.ndarray
    miou: float
    overall_accuracy: float
    mean_class_accuracy: float
    num_points: int = 0
    extras: dict = field(default_factory=dict)

    def rows(self):
        for name, v in zip(self.class_names, self.iou):
            yield name, (None if np.isnan(v) else float(v))

    def summary(self) -> dict:
        return {
            "miou": self.miou,
            "overall_accuracy": self.overall_accuracy,
            "mean_class_accuracy": self.mean_class_accuracy,
            "num_points": self.num_points,
        }


def build_report(cm: ConfusionMatrix, class_names) -> MetricReport:
    iou, mean = miou(cm)
    return MetricReport(
        class_names=list(class_names),
        iou=iou,
        miou=mean,
        overall_accuracy=overall_accuracy(cm),
        mean_class_accuracy=mean_class_accuracy(cm),
        num_points=cm.total,
    )
