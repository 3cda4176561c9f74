"""IoU, average precision and balanced static/dynamic mIoU under a validity mask.

Classes whose valid union is empty (IoU) or that have no valid positives (AP)
are reported as NaN and left out of the means.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


def binarize(scores, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(scores) > threshold


def _check(pred, gt, validity):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    valid = np.asarray(validity).astype(bool)
    spatial = pred.shape[-2:]
    ok = valid.shape == spatial or valid.shape == pred.shape
    if pred.ndim == 4 and valid.shape == (pred.shape[0],) + spatial:
        ok = True
    if not ok:
        raise ValueError(f"validity {valid.shape} does not broadcast over {pred.shape}")
    return pred, gt, valid


def _class_axis_first(a: np.ndarray, valid: np.ndarray):
    """(..., C, Z, W) -> (C, N) with the validity mask broadcast."""
    if a.ndim == 4:  # batch
        a = np.moveaxis(a, 1, 0)
        if valid.ndim == 4:
            valid = np.moveaxis(valid, 1, 0)
        elif valid.ndim == 3:
            valid = valid[None]
        valid = np.broadcast_to(valid, a.shape)
    else:
        valid = np.broadcast_to(valid, a.shape)
    C = a.shape[0]
    return a.reshape(C, -1), valid.reshape(C, -1)


def confusion_counts(pred_masks, gt_masks, validity) -> dict[str, np.ndarray]:
    pred, gt, valid = _check(pred_masks, gt_masks, validity)
    p, v = _class_axis_first(pred.astype(bool), valid)
    g, _ = _class_axis_first(gt.astype(bool), valid)
    return {
        "tp": (p & g & v).sum(1).astype(np.int64),
        "fp": (p & ~g & v).sum(1).astype(np.int64),
        "fn": (~p & g & v).sum(1).astype(np.int64),
    }


def iou_from_counts(tp, fp, fn) -> np.ndarray:
    tp, fp, fn = (np.asarray(x, dtype=np.int64) for x in (tp, fp, fn))
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def iou_per_class(pred_masks, gt_masks, validity) -> np.ndarray:
    c = confusion_counts(pred_masks, gt_masks, validity)
    return iou_from_counts(c["tp"], c["fp"], c["fn"])


def ap_from_scores(scores: np.ndarray, gt: np.ndarray) -> float:
    """Area under the monotone-interpolated PR curve, one point per distinct
    score threshold (a cell is predicted positive when score >= threshold)."""
    scores = np.asarray(scores, dtype=float).ravel()
    gt = np.asarray(gt).astype(bool).ravel()
    n_pos = int(gt.sum())
    if n_pos == 0:
        return math.nan
    order = np.argsort(-scores, kind="stable")
    s, g = scores[order], gt[order]
    tp = np.cumsum(g)
    fp = np.cumsum(~g)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp, fp = tp[last], fp[last]
    recall = tp / n_pos
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    recall = np.r_[0.0, recall]
    # correctly rounded sum, so the value does not depend on summation order
    return math.fsum(np.diff(recall) * precision)


def average_precision(scores, gt, validity) -> tuple[np.ndarray, float]:
    scores, gt, valid = _check(scores, gt, validity)
    s, v = _class_axis_first(np.asarray(scores, dtype=float), valid)
    g, _ = _class_axis_first(gt.astype(bool), valid)
    ap = np.array([ap_from_scores(s[c][v[c]], g[c][v[c]]) for c in range(s.shape[0])])
    return ap, _nanmean(ap)


def _nanmean(a) -> float:
    a = np.asarray(a, dtype=float)
    a = a[~np.isnan(a)]
    return math.fsum(a) / a.size if a.size else math.nan


def _group_sum(iou, ids, weights):
    ids = list(ids)
    if weights is None:
        weights = [1.0 / len(ids)] * len(ids) if ids else []
    weights = np.asarray(weights, dtype=float)
    if len(weights) != len(ids):
        raise ValueError("one weight per class in the group")
    if ids and (np.any(weights < 0) or not math.isclose(weights.sum(), 1.0, abs_tol=1e-9)):
        raise ValueError(f"group weights must be non-negative and sum to 1, got {weights.tolist()}")
    vals = np.asarray([iou[i] for i in ids], dtype=float)
    keep = ~np.isnan(vals)
    if not keep.any():
        return math.nan
    # renormalize over classes that were evaluated
    return math.fsum(weights[keep] * vals[keep]) / math.fsum(weights[keep])


def bamiou(per_class_iou, static_ids, dynamic_ids, group_weights=None) -> tuple[float, float, float]:
    """Weighted static IoU + weighted dynamic IoU; weights sum to 1 per group.

    ``group_weights`` is an optional (static_weights, dynamic_weights) pair,
    uniform by default.
    """
    st_ids, dy_ids = list(static_ids), list(dynamic_ids)
    if set(st_ids) & set(dy_ids):
        raise ValueError("static and dynamic ids overlap")
    if sorted(st_ids + dy_ids) != list(range(len(per_class_iou))):
        raise ValueError("static and dynamic ids must partition the class set")
    ws, wd = group_weights if group_weights is not None else (None, None)
    st = _group_sum(per_class_iou, st_ids, ws)
    dy = _group_sum(per_class_iou, dy_ids, wd)
    total = (0.0 if math.isnan(st) else st) + (0.0 if math.isnan(dy) else dy)
    return st, dy, total


def _jsonable(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    return x


@dataclass
class MetricReport:
    class_names: list[str]
    per_class_iou: list[float]
    miou: float
    per_class_ap: list[float]
    map: float
    iou_st: float
    iou_dy: float
    bamiou: float
    counts: dict[str, list[int]]
    evaluated_cells: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable({
            "class_names": self.class_names,
            "per_class_iou": [float(v) for v in self.per_class_iou],
            "miou": self.miou,
            "per_class_ap": [float(v) for v in self.per_class_ap],
            "map": self.map,
            "iou_st": self.iou_st,
            "iou_dy": self.iou_dy,
            "bamiou": self.bamiou,
            "counts": self.counts,
            "evaluated_cells": self.evaluated_cells,
            **({"extra": self.extra} if self.extra else {}),
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class MetricAccumulator:
    """Accumulates counts and (score, label) pairs over batches; order of
    updates does not change the final report."""

    def __init__(self, class_names, static_ids, dynamic_ids, threshold=0.5):
        self.class_names = list(class_names)
        self.static_ids, self.dynamic_ids = list(static_ids), list(dynamic_ids)
        self.threshold = threshold
        C = len(self.class_names)
        self.tp = np.zeros(C, np.int64)
        self.fp = np.zeros(C, np.int64)
        self.fn = np.zeros(C, np.int64)
        self.cells = 0
        self._scores = [[] for _ in range(C)]
        self._labels = [[] for _ in range(C)]

    def update(self, scores, gt, validity):
        """scores, gt: (C, Z, W) or (B, C, Z, W); validity (Z, W) or (B, Z, W)."""
        scores, gt, valid = np.asarray(scores, float), np.asarray(gt), np.asarray(validity).astype(bool)
        c = confusion_counts(binarize(scores, self.threshold), gt, valid)
        self.tp += c["tp"]
        self.fp += c["fp"]
        self.fn += c["fn"]
        self.cells += int(valid.sum())
        s, v = _class_axis_first(scores, valid)
        g, _ = _class_axis_first(gt.astype(bool), valid)
        for k in range(len(self.class_names)):
            self._scores[k].append(s[k][v[k]])
            self._labels[k].append(g[k][v[k]])

    def report(self, group_weights=None) -> MetricReport:
        iou = iou_from_counts(self.tp, self.fp, self.fn)
        ap = np.array([
            ap_from_scores(np.concatenate(self._scores[k]) if self._scores[k] else np.zeros(0),
                           np.concatenate(self._labels[k]) if self._labels[k] else np.zeros(0, bool))
            for k in range(len(self.class_names))
        ])
        st, dy, bam = bamiou(iou, self.static_ids, self.dynamic_ids, group_weights)
        return MetricReport(
            self.class_names, iou.tolist(), _nanmean(iou), ap.tolist(), _nanmean(ap), st, dy, bam,
            {"tp": self.tp.tolist(), "fp": self.fp.tolist(), "fn": self.fn.tolist()}, self.cells,
        )


def evaluate_arrays(scores, gt, validity, class_names, static_ids, dynamic_ids, group_weights=None) -> MetricReport:
    acc = MetricAccumulator(class_names, static_ids, dynamic_ids)
    acc.update(scores, gt, validity)
    return acc.report(group_weights)
