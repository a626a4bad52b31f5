"""Closed-set and open-set evaluation.

Unknown is the positive class and a unit is flagged unknown iff
``score >= threshold``. Thresholds run over the distinct scores plus
+/-inf. Counts are kept as integers and sums go through ``math.fsum``, so
the sort-based routines here agree bit-for-bit with an exhaustive sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np


@dataclass
class ScoreDump:
    unit_ids: list
    scores: np.ndarray
    is_unknown: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.is_unknown = np.asarray(self.is_unknown, dtype=bool).reshape(-1)
        if len(self.scores) != len(self.is_unknown) or len(self.unit_ids) != len(self.scores):
            raise ValueError("unit_ids, scores and is_unknown must have equal length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @classmethod
    def from_arrays(cls, scores, is_unknown) -> "ScoreDump":
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        return cls([str(i) for i in range(len(scores))], scores, is_unknown)

    def has_both_classes(self) -> bool:
        return bool(self.is_unknown.any() and (~self.is_unknown).any())


@dataclass
class MetricsReport:
    auroc: float | None = None
    aupr: float | None = None
    fpr_at_95_tpr: float | None = None
    detection_error: float | None = None
    miou: float | None = None
    accuracy_sample: float | None = None
    accuracy_class: float | None = None

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}


def _unpack(dump, is_unknown):
    if isinstance(dump, ScoreDump):
        scores, unk = dump.scores, dump.is_unknown
    else:
        scores = np.asarray(dump, dtype=np.float64).reshape(-1)
        unk = np.asarray(is_unknown, dtype=bool).reshape(-1)
    if len(scores) != len(unk):
        raise ValueError(f"{len(scores)} scores but {len(unk)} class flags")
    n_pos = int(unk.sum())
    n_neg = len(unk) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("open-set metrics need at least one known and one unknown unit")
    return scores, unk, n_pos, n_neg


def _sweep(scores, unk):
    """Cumulative (tp, fp) counts at each distinct score, highest threshold first.

    Entry i counts units with score >= the i-th largest distinct score.
    """
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    u = unk[order]
    tp = np.cumsum(u, dtype=np.int64)
    fp = np.cumsum(~u, dtype=np.int64)
    last = np.r_[s[1:] != s[:-1], True]
    return tp[last], fp[last]


def auroc(dump, is_unknown=None) -> float:
    """P(random unknown scores above random known), ties counting one half."""
    scores, unk, n_pos, n_neg = _unpack(dump, is_unknown)
    pos = np.sort(scores[unk])
    neg = np.sort(scores[~unk])
    below = np.searchsorted(neg, pos, side="left")
    not_above = np.searchsorted(neg, pos, side="right")
    greater = int(below.sum())
    ties = int((not_above - below).sum())
    return (2 * greater + ties) / (2 * n_pos * n_neg)


def aupr(dump, is_unknown=None) -> float:
    """Average precision, sum over thresholds of (R_n - R_{n-1}) * P_n."""
    scores, unk, n_pos, _ = _unpack(dump, is_unknown)
    tp, fp = _sweep(scores, unk)
    prev = np.r_[0, tp[:-1]]
    keep = tp > prev
    terms = ((tp[keep] - prev[keep]) / n_pos) * (tp[keep] / (tp[keep] + fp[keep]))
    return math.fsum(terms.tolist())


def fpr_at_tpr(dump, is_unknown=None, tpr_floor: float = 0.95) -> float:
    """Smallest false-positive rate among thresholds reaching ``tpr_floor``."""
    scores, unk, n_pos, n_neg = _unpack(dump, is_unknown)
    tp, fp = _sweep(scores, unk)
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    ok = tp / n_pos >= tpr_floor
    # the lowest threshold flags everything (tp = n_pos), so ok is never empty
    return float((fp[ok] / n_neg).min())


def detection_error(dump, is_unknown=None) -> float:
    """min over thresholds of 0.5 * (1 - TPR) + 0.5 * FPR."""
    scores, unk, n_pos, n_neg = _unpack(dump, is_unknown)
    tp, fp = _sweep(scores, unk)
    tp = np.r_[0, tp]
    fp = np.r_[0, fp]
    err = 0.5 * (1.0 - tp / n_pos) + 0.5 * (fp / n_neg)
    return float(err.min())


def open_set_metrics(dump, is_unknown=None) -> dict:
    return {
        "auroc": auroc(dump, is_unknown),
        "aupr": aupr(dump, is_unknown),
        "fpr_at_95_tpr": fpr_at_tpr(dump, is_unknown),
        "detection_error": detection_error(dump, is_unknown),
    }


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    size = max(num_classes, int(pred.max(initial=0)) + 1, int(gt.max(initial=0)) + 1)
    cm = np.bincount(gt * size + pred, minlength=size * size).reshape(size, size)
    return cm


def miou(pred_labels, gt_labels, over_classes) -> float:
    """Mean IoU over ``over_classes``, evaluated on points whose ground truth is
    one of those classes. Classes absent from both prediction and ground
    truth are skipped."""
    pred = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions for {len(gt)} labels")
    classes = np.asarray(list(over_classes), dtype=np.int64)
    mask = np.isin(gt, classes)
    if not mask.any():
        raise ValueError("no points with a ground-truth label in the evaluated classes")
    pred, gt = pred[mask], gt[mask]
    ious = []
    for c in classes:
        tp = int(np.sum((pred == c) & (gt == c)))
        fp = int(np.sum((pred == c) & (gt != c)))
        fn = int(np.sum((pred != c) & (gt == c)))
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return math.fsum(ious) / len(ious)


def accuracy(pred, gt, mode: str = "per_sample") -> float:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if len(gt) == 0:
        raise ValueError("accuracy of an empty set")
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions for {len(gt)} labels")
    if mode == "per_sample":
        return int((pred == gt).sum()) / len(gt)
    if mode == "per_class_mean":
        recalls = [int((pred[gt == c] == c).sum()) / int((gt == c).sum()) for c in np.unique(gt)]
        return math.fsum(recalls) / len(recalls)
    raise ValueError(f"unknown accuracy mode {mode!r}")
