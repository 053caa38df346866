"""Loss and task-weighting formulas of the multi-task plume model, written as
plain numpy evaluators (no autograd).

The mask loss is the distance-IoU expression ``-IoU + rho^2 / c^2`` taken as
printed; pass ``one_minus_iou=True`` for the usual ``1 - IoU`` offset.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import (ConfigurationError, EmptyMaskError, InvalidInputError,
                   PlumeInstance, ShapeMismatchError, mask_iou)

RATE_NORMALISER_KGPH = 1000.0
DEFAULT_MASK_C = 10.0
DEFAULT_LAMBDA = 0.1


class InsufficientHistoryError(InvalidInputError):
    pass


def _vectors(y, yhat):
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    yhat = np.atleast_1d(np.asarray(yhat, dtype=np.float64))
    if y.shape != yhat.shape:
        raise ShapeMismatchError(f"length mismatch: {y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise InvalidInputError("need at least one element")
    return y, yhat


def mse(y, yhat) -> float:
    y, yhat = _vectors(y, yhat)
    return float(np.mean((y - yhat) ** 2))


def smooth_l1_elementwise(x) -> np.ndarray:
    """0.5 x^2 inside |x| < 1, |x| - 0.5 outside."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1(y, yhat) -> float:
    """Mean Smooth-L1 of the residuals ``y - yhat``."""
    y, yhat = _vectors(y, yhat)
    return float(np.mean(smooth_l1_elementwise(y - yhat)))


def cross_entropy(y, yhat, eps: float = 1e-12) -> float:
    """Mean over samples of ``-sum(y log yhat)``; rows of ``yhat`` must be
    probability vectors."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    p = np.atleast_2d(np.asarray(yhat, dtype=np.float64))
    if y.shape != p.shape:
        raise ShapeMismatchError(f"shape mismatch: {y.shape} vs {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise InvalidInputError("each prediction row must be a probability vector")
    p = np.clip(p, eps, 1.0)
    return float(np.mean(-(y * np.log(p)).sum(axis=1)))


def box_loss(pred_boxes, true_boxes) -> float:
    """Sum of Smooth-L1 over every box and its four (cx, cy, w, h) parameters."""
    p = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(true_boxes, dtype=np.float64).reshape(-1, 4)
    if p.shape != t.shape:
        raise ShapeMismatchError(f"{p.shape[0]} predicted boxes vs {t.shape[0]} true boxes")
    return float(smooth_l1_elementwise(t - p).sum())


def _centroid(mask):
    rows, cols = np.nonzero(mask)
    return np.array([rows.mean(), cols.mean()])


def mask_loss(true_mask, pred_mask, c: float = DEFAULT_MASK_C, one_minus_iou: bool = False) -> float:
    """``-IoU + rho^2 / c^2`` with rho the distance between the mask centroids
    (pixels).  ``one_minus_iou`` adds 1 so a perfect mask scores 0."""
    a = np.asarray(true_mask, dtype=bool)
    b = np.asarray(pred_mask, dtype=bool)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise EmptyMaskError("mask loss needs two non-empty masks")
    if not c > 0:
        raise ConfigurationError("c must be positive")
    rho2 = float(np.sum((_centroid(a) - _centroid(b)) ** 2))
    loss = -mask_iou(a, b) + rho2 / (c * c)
    return loss + 1.0 if one_minus_iou else loss


def maskrcnn_loss(cls_loss: float, box: float, mask: float) -> float:
    terms = [float(cls_loss), float(box), float(mask)]
    if not all(math.isfinite(t) for t in terms):
        raise InvalidInputError("loss components must be finite")
    return math.fsum(terms)


@dataclass(frozen=True)
class DetectionPair:
    """One row of the rate-loss bookkeeping.  ``kind`` is ``TP`` (both sides),
    ``FP`` (prediction only) or ``FN`` (truth only)."""
    kind: str
    predicted: Optional[PlumeInstance] = None
    predicted_rate: Optional[float] = None
    truth: Optional[PlumeInstance] = None
    true_rate: Optional[float] = None
    #: sum of map values under the predicted mask, used by the exclusion rule
    predicted_pixel_sum: Optional[float] = None

    def __post_init__(self):
        if self.kind == "TP":
            ok = self.predicted_rate is not None and self.true_rate is not None
        elif self.kind == "FP":
            ok = self.predicted_rate is not None and self.true_rate is None
        elif self.kind == "FN":
            ok = self.predicted_rate is None and self.true_rate is not None
        else:
            raise InvalidInputError(f"unknown match kind {self.kind!r}")
        if not ok:
            raise InvalidInputError(f"{self.kind} pair has the wrong sides present")


def match_detections(predicted: Sequence[PlumeInstance], truths: Sequence[PlumeInstance],
                     iou_threshold: float = 0.5, values=None) -> List[DetectionPair]:
    """Greedy one-to-one matching by descending mask IoU.

    Pairs with IoU >= ``iou_threshold`` become TP; left-over predictions are FP
    and left-over truths FN.  Rates come from each instance's ``emission_rate``
    (a prediction without one counts as 0).  With ``values`` (a 2-D map) the
    predicted pixel sums are filled in for the exclusion rule of :func:`er_loss`.
    """
    ious = np.array([[mask_iou(p.mask, t.mask) for t in truths] for p in predicted]).reshape(len(predicted), len(truths))
    cand = [(ious[i, j], i, j) for i in range(len(predicted)) for j in range(len(truths))
            if ious[i, j] >= iou_threshold]
    # ties broken by (prediction, truth) index so the result is deterministic
    cand.sort(key=lambda c: (-c[0], c[1], c[2]))
    used_p, used_t, pairs = set(), set(), []

    def psum(inst):
        if inst.pixel_sum is not None:
            return inst.pixel_sum
        return None if values is None else float(np.asarray(values)[inst.mask].sum())

    def prate(inst):
        return 0.0 if inst.emission_rate is None else float(inst.emission_rate)

    for _, i, j in cand:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        pairs.append(DetectionPair("TP", predicted[i], prate(predicted[i]), truths[j],
                                   float(truths[j].emission_rate or 0.0), psum(predicted[i])))
    for i, p in enumerate(predicted):
        if i not in used_p:
            pairs.append(DetectionPair("FP", p, prate(p), predicted_pixel_sum=psum(p)))
    for j, t in enumerate(truths):
        if j not in used_t:
            pairs.append(DetectionPair("FN", truth=t, true_rate=float(t.emission_rate or 0.0)))
    return pairs


def er_loss(pairs: Sequence[DetectionPair], ime_min: float = 300.0,
            normaliser: float = RATE_NORMALISER_KGPH) -> float:
    """Mean Smooth-L1 rate error over the retained pairs, rates divided by
    ``normaliser``.  TP compares truth to prediction, FP compares 0 to the
    prediction, FN compares the truth to 0.  Predictions whose pixel sum is
    below ``ime_min`` are dropped (FN rows have no prediction and are kept)."""
    terms = []
    for p in pairs:
        if p.kind != "FN" and p.predicted_pixel_sum is not None and p.predicted_pixel_sum < ime_min:
            continue
        true = (p.true_rate or 0.0) / normaliser
        pred = (p.predicted_rate or 0.0) / normaliser
        terms.append(float(smooth_l1_elementwise(true - pred)))
    if not terms:
        warnings.warn("no pairs retained for the rate loss; returning 0")
        return 0.0
    return math.fsum(terms) / len(terms)


def mtl01_loss(maskrcnn: float, er: float, lam: float = DEFAULT_LAMBDA) -> float:
    return float(maskrcnn) + float(lam) * float(er)


def mtl02_loss(unet: float, maskrcnn: float, w1: float, w2: float) -> float:
    if w1 < 0 or w2 < 0:
        raise ConfigurationError("task weights must be >= 0")
    return float(w1) * float(unet) + float(w2) * float(maskrcnn)


@dataclass
class LossHistory:
    """Epoch-averaged loss per task, oldest first."""
    losses: Dict[str, List[float]] = field(default_factory=dict)

    def record(self, **epoch_losses: float) -> None:
        for name, value in epoch_losses.items():
            self.losses.setdefault(name, []).append(float(value))

    @property
    def tasks(self) -> List[str]:
        return list(self.losses)


def dwa_weights(history: LossHistory, temperature: float = 2.0) -> np.ndarray:
    """Dynamic weight averaging: ``w_k = L_k(t-1) / L_k(t-2)`` and
    ``lambda = K softmax(w / T)``, in the task order of ``history``."""
    if not temperature > 0:
        raise ConfigurationError("temperature must be positive")
    tasks = history.tasks
    if not tasks:
        raise InsufficientHistoryError("history holds no tasks")
    w = []
    for name in tasks:
        seq = history.losses[name]
        if len(seq) < 2:
            raise InsufficientHistoryError(f"task {name!r} has {len(seq)} epoch(s), need 2")
        prev, prev2 = seq[-1], seq[-2]
        if prev2 == 0:
            raise ZeroDivisionError(f"task {name!r} has a zero loss at epoch t-2")
        w.append(prev / prev2)
    z = np.asarray(w) / temperature
    e = np.exp(z - z.max())
    k = len(tasks)
    lam = k * e / e.sum()
    return lam


def loss_report(losses: Dict[str, float], weights=None, config: Optional[Dict] = None) -> Dict:
    """JSON-ready loss record ``{<name>: value, dwa_weights: [...], config: {...}}``."""
    out = {name: float(v) for name, v in losses.items()}
    out["dwa_weights"] = [] if weights is None else [float(x) for x in weights]
    out["config"] = dict(config or {})
    return out
