"""Confusion-matrix based IoU, common mIoU, private IoU and H-Score."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import netcore
from .datamodel import IGNORE_INDEX, ClassSpace, Dataset, ValidationError


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions, over classes ``0..K``."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, gt: np.ndarray, pred: np.ndarray) -> ConfusionMatrix:
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValidationError(f"gt shape {gt.shape} != prediction shape {pred.shape}")
    n = cm.num_classes
    if (pred == IGNORE_INDEX).any():
        raise ValidationError("predictions must not contain the ignore index")
    if (pred >= n).any():
        raise ValidationError(f"prediction value outside 0..{n - 1}")
    keep = gt != IGNORE_INDEX
    g = gt[keep].astype(np.int64)
    if (g >= n).any():
        raise ValidationError(f"ground-truth value outside 0..{n - 1}")
    p = pred[keep].astype(np.int64)
    add = np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(cm.counts + add)


def h_score(common: float, private: float) -> float:
    """Harmonic mean of common mIoU and private IoU (0 when both are 0)."""
    if common + private <= 0:
        return 0.0
    return 2.0 * common * private / (common + private)


@dataclass(frozen=True)
class MetricsReport:
    per_class_iou: List[Optional[float]]
    common_miou: float
    private_iou: float
    h_score: float
    # known classes left out of the common mean because they never occur
    excluded_classes: tuple = ()

    @classmethod
    def from_scores(cls, common: float, private: float, per_class_iou=None) -> "MetricsReport":
        return cls(list(per_class_iou or []), common, private, h_score(common, private))

    def as_percent(self) -> dict:
        return {
            "common": round(100 * self.common_miou, 2),
            "private": round(100 * self.private_iou, 2),
            "h_score": round(100 * self.h_score, 2),
        }


def per_class_iou(cm: ConfusionMatrix) -> List[Optional[float]]:
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    return [None if u == 0 else float(t / u) for t, u in zip(tp, union)]


def compute_report(cm: ConfusionMatrix, cs: ClassSpace) -> MetricsReport:
    if cm.num_classes != cs.num_classes:
        raise ValidationError(f"confusion matrix has {cm.num_classes} classes, expected {cs.num_classes}")
    ious = per_class_iou(cm)
    known = ious[: cs.num_known]
    defined = [v for v in known if v is not None]
    excluded = tuple(i for i, v in enumerate(known) if v is None)
    common = float(np.mean(defined)) if defined else 0.0
    private = ious[cs.unknown_index] or 0.0
    return MetricsReport(ious, common, private, h_score(common, private), excluded)


def evaluate(model, val: Dataset, batch_size: int = 16) -> MetricsReport:
    """Full (K+1)-way argmax prediction on every image, accumulated into one report."""
    cs = val.class_space
    if model.num_outputs != cs.num_classes:
        raise ValidationError(f"model head has {model.num_outputs} outputs, expected K+1={cs.num_classes}")
    if len(val) == 0:
        raise ValidationError("validation set is empty")
    cm = ConfusionMatrix.empty(cs.num_classes)
    images, labels = val.images(), val.labels()
    for s in range(0, len(val), batch_size):
        pred = netcore.predict(model, images[s:s + batch_size])
        cm = accumulate(cm, labels[s:s + batch_size], pred)
    return compute_report(cm, cs)


def evaluate_predictions(preds, val: Dataset) -> MetricsReport:
    cs = val.class_space
    cm = ConfusionMatrix.empty(cs.num_classes)
    for pred, item in zip(preds, val.items):
        cm = accumulate(cm, item.label, pred)
    return compute_report(cm, cs)


def report_rows(report: MetricsReport) -> List[List[str]]:
    """``class,iou`` rows followed by the summary rows, values in percent."""
    rows = [["class", "iou"]]
    for k, v in enumerate(report.per_class_iou):
        rows.append([str(k), "" if v is None else f"{100 * v:.2f}"])
    pct = report.as_percent()
    rows += [["common", f"{pct['common']:.2f}"], ["private", f"{pct['private']:.2f}"],
             ["h_score", f"{pct['h_score']:.2f}"]]
    return rows
