"""Matched-filter methane retrieval with K-means background masking.

For a pixel spectrum L, background mean mu and covariance C, and target t::

    alpha = (L - mu)^T C^-1 t / (t^T C^-1 t)

The target is the first-order Beer-Lambert perturbation of the mean radiance,
``t = -mu * d`` with ``d`` the band optical depth per ppb, so alpha is in ppb.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import scipy.linalg
from scipy.cluster.vq import kmeans2

from .core import (ConcentrationMap, ConfigurationError, HyperCube,
                   InvalidInputError, PlumeError, ShapeMismatchError)
from .spectral import preprocess

logger = logging.getLogger(__name__)

DEFAULT_SHRINKAGE = 0.05


class NumericalError(PlumeError, ArithmeticError):
    pass


class DegenerateSignatureError(PlumeError, ValueError):
    pass


class DegenerateBackgroundError(PlumeError, ValueError):
    pass


@dataclass(frozen=True)
class BackgroundStats:
    mean: np.ndarray
    covariance: np.ndarray
    pixel_count: int
    shrinkage: float

    @property
    def bands(self) -> int:
        return self.mean.size


def background_stats(spectra, shrinkage: float = DEFAULT_SHRINKAGE) -> BackgroundStats:
    """Mean and shrunk covariance of ``N x B`` spectra.

    C is the maximum-likelihood (divide by N) covariance, blended towards its
    diagonal: ``(1 - s) C + s diag(C)``.  With fewer than B + 1 pixels the
    shrinkage is raised to at least ``(B + 1 - N) / (B + 1)``.
    """
    x = np.asarray(spectra, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError("spectra must be N x B")
    n, b = x.shape
    if n < 2:
        raise InvalidInputError(f"background statistics need at least 2 pixels, got {n}")
    if not 0 <= shrinkage <= 1:
        raise ConfigurationError(f"shrinkage must lie in [0, 1], got {shrinkage}")
    if n < b + 1:
        shrinkage = max(shrinkage, (b + 1 - n) / (b + 1))
    mu = x.mean(axis=0)
    xc = x - mu
    cov = (xc.T @ xc) / n
    cov = 0.5 * (cov + cov.T)
    cov = (1.0 - shrinkage) * cov + shrinkage * np.diag(np.diag(cov))
    return BackgroundStats(mu, cov, n, float(shrinkage))


def target_signature(stats: BackgroundStats, unit_depth) -> np.ndarray:
    """``t = -mu * d``: radiance change per ppb at the background mean."""
    d = np.asarray(unit_depth, dtype=np.float64)
    if d.shape != stats.mean.shape:
        raise ShapeMismatchError(f"unit depth has {d.size} bands, background has {stats.bands}")
    if np.any(stats.mean == 0):
        raise DegenerateBackgroundError("background mean is zero in at least one band")
    return -stats.mean * d


def filter_scores(spectra, stats: BackgroundStats, target, label: str = "mask", return_norm: bool = False):
    """Raw (unclamped) matched-filter scores of ``... x B`` spectra, optionally
    with the normaliser ``t^T C^-1 t``."""
    t = np.asarray(target, dtype=np.float64)
    try:
        factor = scipy.linalg.cho_factor(stats.covariance, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError):
        raise NumericalError(f"covariance of {label} is singular after shrinkage") from None
    cinv_t = scipy.linalg.cho_solve(factor, t)
    norm = float(t @ cinv_t)
    if not norm > 0:
        raise DegenerateSignatureError(f"t^T C^-1 t = {norm} <= 0 for {label}")
    x = np.asarray(spectra, dtype=np.float64)
    scores = ((x - stats.mean) @ cinv_t) / norm
    return (scores, norm) if return_norm else scores


@dataclass
class Retrieval:
    map: ConcentrationMap
    #: unclamped scores, zero outside the processed masks
    raw: np.ndarray
    diagnostics: Dict = field(default_factory=dict)


def matched_filter(cube: HyperCube, mask, unit_depth, shrinkage: float = DEFAULT_SHRINKAGE,
                   per_column: bool = False, label: str = "mask", pixel_size: float = 30.0) -> Retrieval:
    """Retrieve enhancement (ppb) for the pixels in ``mask`` using statistics of
    those same pixels.  Negative values are clamped to 0 in ``map`` and kept in
    ``raw``; pixels outside the mask are 0.  ``per_column`` estimates separate
    statistics for every image column (pushbroom detectors)."""
    h, w, b = cube.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (h, w):
        raise ShapeMismatchError(f"mask shape {mask.shape} != image shape {(h, w)}")
    if mask.sum() < 2:
        raise InvalidInputError(f"{label} has fewer than 2 pixels")
    raw = np.zeros((h, w))
    norms = []
    groups = [(mask & (np.arange(w) == j)[None, :], f"{label}/column {j}") for j in range(w)] if per_column \
        else [(mask, label)]
    used_shrinkage = shrinkage
    for m, name in groups:
        if m.sum() < 2:
            continue
        x = cube.radiance[m]
        stats = background_stats(x, shrinkage)
        used_shrinkage = max(used_shrinkage, stats.shrinkage)
        t = target_signature(stats, unit_depth)
        raw[m], norm = filter_scores(x, stats, t, name, return_norm=True)
        norms.append(norm)
    out = np.maximum(raw, 0.0)
    diag = {"shrinkage": used_shrinkage, "pixel_count": int(mask.sum()),
            "t_cinv_t": norms[0] if len(norms) == 1 else norms}
    return Retrieval(ConcentrationMap(out, pixel_size), raw, diag)


def kmeans_labels(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> np.ndarray:
    """Lloyd's algorithm (scipy ``kmeans2``) with k-means++ seeding.  Labels are renumbered in order
    of first appearance so the result does not depend on centre order."""
    n = x.shape[0]
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    if k > n:
        raise ConfigurationError(f"k={k} exceeds the pixel count {n}")
    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # empty clusters are kept as-is
        _, labels = kmeans2(x, k, iter=max_iter, thresh=tol, minit="++", seed=rng)
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(k, dtype=int)
    present = np.unique(labels)[order]
    remap[present] = np.arange(present.size)
    return remap[labels]


def kmeans_mask(cube: HyperCube, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> List[np.ndarray]:
    """Partition the image into ``k`` disjoint masks by clustering log-normalised spectra."""
    h, w, b = cube.shape
    if k > h * w:
        raise ConfigurationError(f"k={k} exceeds the pixel count {h * w}")
    x = preprocess(cube).reshape(-1, b)
    labels = kmeans_labels(x, k, seed, max_iter, tol).reshape(h, w)
    return [labels == j for j in range(labels.max() + 1)]


def _merge_small(masks: List[np.ndarray], cube: HyperCube, min_pixels: int) -> List[np.ndarray]:
    masks = [m.copy() for m in masks if m.any()]
    x = preprocess(cube)
    while len(masks) > 1:
        sizes = [int(m.sum()) for m in masks]
        small = int(np.argmin(sizes))
        if sizes[small] >= min_pixels:
            break
        cents = [x[m].mean(axis=0) for m in masks]
        dist = [np.inf if j == small else np.linalg.norm(cents[j] - cents[small]) for j in range(len(masks))]
        target = int(np.argmin(dist))
        warnings.warn(f"cluster with {sizes[small]} pixels (< {min_pixels}) merged into its nearest cluster")
        masks[target] = masks[target] | masks[small]
        del masks[small]
    return masks


def invert(cube: HyperCube, unit_depth, k: int = 4, shrinkage: float = DEFAULT_SHRINKAGE, seed: int = 0,
           per_column: bool = False, pixel_size: float = 30.0) -> Retrieval:
    """K-means masking followed by a matched filter inside each cluster."""
    masks = kmeans_mask(cube, k, seed)
    masks = _merge_small(masks, cube, cube.bands + 1)
    raw = np.zeros(cube.shape[:2])
    diag = {"clusters": len(masks), "shrinkage": shrinkage, "pixel_counts": [], "t_cinv_t": []}
    for i, m in enumerate(masks):
        r = matched_filter(cube, m, unit_depth, shrinkage, per_column, label=f"cluster {i}", pixel_size=pixel_size)
        raw[m] = r.raw[m]
        diag["pixel_counts"].append(int(m.sum()))
        diag["t_cinv_t"].append(r.diagnostics["t_cinv_t"])
    return Retrieval(ConcentrationMap(np.maximum(raw, 0.0), pixel_size), raw, diag)
