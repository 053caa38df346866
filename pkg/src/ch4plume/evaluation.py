"""Accuracy metrics: RMSE/MAE, precision-recall and interpolated AP at mask-IoU
thresholds, and ordinary least-squares fit diagnostics."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .core import InvalidInputError, PPB_PER_PPM, ShapeMismatchError, mask_iou

AP_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))


class UndefinedMetricWarning(UserWarning):
    pass


def _pair(y, yhat) -> Tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ShapeMismatchError(f"length mismatch: {y.size} vs {yhat.size}")
    if y.size == 0:
        raise InvalidInputError("need at least one value")
    return y, yhat


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def pearson(x, y) -> float:
    x, y = _pair(x, y)
    x = x - x.mean()
    y = y - y.mean()
    denom = np.sqrt((x * x).sum() * (y * y).sum())
    if denom == 0:
        return float("nan")
    return float((x * y).sum() / denom)


def linear_fit(x, y) -> Tuple[float, float, float]:
    """OLS line ``y = slope*x + intercept``.  Returns ``(slope, intercept, r_squared)``;
    r_squared is 0 when y is constant."""
    x, y = _pair(x, y)
    if x.size < 2:
        raise InvalidInputError("linear fit needs at least 2 points")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0 or np.unique(x).size < 2:
        raise InvalidInputError("linear fit needs at least 2 distinct x values")
    slope = np.sum((x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    ss_tot = np.sum((y - ym) ** 2)
    if ss_tot == 0:
        return float(slope), float(intercept), 0.0
    ss_res = np.sum((y - (slope * x + intercept)) ** 2)
    return float(slope), float(intercept), float(1.0 - ss_res / ss_tot)


@dataclass(frozen=True)
class MatchTable:
    """Detections of one image: confidence scores and their IoU against every truth.

    ``ious`` has shape ``(n_detections, truth_count)``.
    """

    scores: np.ndarray
    ious: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        iou = np.asarray(self.ious, dtype=np.float64)
        if iou.ndim != 2 or iou.shape[0] != s.size:
            raise ShapeMismatchError(f"ious must be ({s.size}, T), got {iou.shape}")
        order = np.argsort(-s, kind="stable")
        object.__setattr__(self, "scores", s[order])
        object.__setattr__(self, "ious", iou[order])

    @property
    def truth_count(self) -> int:
        return self.ious.shape[1]

    @classmethod
    def from_instances(cls, predicted_masks: Sequence[np.ndarray], scores: Sequence[float],
                       truth_masks: Sequence[np.ndarray]) -> "MatchTable":
        iou = np.zeros((len(predicted_masks), len(truth_masks)))
        for i, p in enumerate(predicted_masks):
            for j, t in enumerate(truth_masks):
                iou[i, j] = mask_iou(p, t)
        return cls(np.asarray(scores, dtype=np.float64), iou)

    @classmethod
    def from_best_ious(cls, detections: Sequence[Tuple[float, float]], truth_count: int) -> "MatchTable":
        """Build from ``(score, IoU-with-own-truth)`` pairs; detection ``i`` overlaps
        only truth ``i`` (detections beyond ``truth_count`` overlap nothing)."""
        iou = np.zeros((len(detections), truth_count))
        scores = []
        for i, (score, v) in enumerate(detections):
            scores.append(score)
            if i < truth_count:
                iou[i, i] = v
        return cls(np.asarray(scores, dtype=np.float64), iou)

    def true_positives(self, iou_threshold: float) -> np.ndarray:
        """Greedy matching in descending score order; each detection claims the
        unclaimed truth with the highest IoU at or above the threshold."""
        claimed = np.zeros(self.truth_count, dtype=bool)
        tp = np.zeros(self.scores.size, dtype=bool)
        for i in range(self.scores.size):
            cand = np.where(~claimed & (self.ious[i] >= iou_threshold), self.ious[i], -1.0)
            if cand.size and cand.max() >= 0:
                j = int(np.argmax(cand))
                claimed[j] = True
                tp[i] = True
        return tp


def _pool(tables, iou_threshold: float) -> Tuple[np.ndarray, np.ndarray, int]:
    if isinstance(tables, MatchTable):
        tables = [tables]
    scores, hits, truth = [], [], 0
    for t in tables:
        scores.append(t.scores)
        hits.append(t.true_positives(iou_threshold))
        truth += t.truth_count
    if not scores:
        return np.zeros(0), np.zeros(0, bool), 0
    s = np.concatenate(scores)
    h = np.concatenate(hits)
    order = np.argsort(-s, kind="stable")
    return s[order], h[order], truth


def precision_recall(tables, iou_threshold: float = 0.5) -> List[Tuple[float, float]]:
    """Precision/recall after each detection, sweeping the score threshold downwards.

    ``tables`` is one :class:`MatchTable` or a sequence of them (one per image).
    """
    _, hits, truth = _pool(tables, iou_threshold)
    if hits.size == 0:
        return []
    tp = np.cumsum(hits)
    n = np.arange(1, hits.size + 1)
    precision = tp / n
    if truth == 0:
        warnings.warn("no ground-truth instances: recall is undefined", UndefinedMetricWarning)
        recall = np.full(hits.size, np.nan)
    else:
        recall = tp / truth
    return list(zip(precision.tolist(), recall.tolist()))


def average_precision(curve: Sequence[Tuple[float, float]]) -> float:
    """Sum of recall steps times the interpolated precision (max precision at
    any recall at or beyond the step's right end)."""
    if len(curve) == 0:
        return 0.0
    p = np.array([c[0] for c in curve], dtype=np.float64)
    r = np.array([c[1] for c in curve], dtype=np.float64)
    if np.any(np.isnan(r)):
        return float("nan")
    r = np.concatenate(([0.0], r))
    p = np.concatenate(([0.0], p))
    interp = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum(np.diff(r) * interp[1:]))


def ap_at(tables, iou_threshold: float) -> float:
    return average_precision(precision_recall(tables, iou_threshold))


def ap_suite(tables) -> Dict[str, float]:
    """AP at IoU 0.50, 0.75, 0.95 and the mean over 0.50:0.05:0.95."""
    per = {t: ap_at(tables, t) for t in AP_THRESHOLDS}
    return {
        "AP50": per[0.5],
        "AP75": per[0.75],
        "AP95": per[0.95],
        "AP50:95": float(np.mean(list(per.values()))),
    }


def regression_report(method: str, y_ppb, yhat_ppb) -> Dict:
    """Row in ppm, like the concentration-inversion tables."""
    y = np.asarray(y_ppb, dtype=np.float64) / PPB_PER_PPM
    yhat = np.asarray(yhat_ppb, dtype=np.float64) / PPB_PER_PPM
    return {"method": method, "rmse_ppm": rmse(y, yhat), "mae_ppm": mae(y, yhat)}


def segmentation_report(method: str, tables: Iterable[MatchTable]) -> Dict:
    s = ap_suite(list(tables))
    return {"method": method, "ap50": s["AP50"], "ap75": s["AP75"], "ap95": s["AP95"], "ap50_95": s["AP50:95"]}
