"""Shared domain types and the two primitives used everywhere: IME and boxes.

All grids are row-major with the origin at the top-left pixel.  Concentrations
are column enhancements in ppb; reporting layers convert to ppm by 1000.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

#: kg of methane per ppb of column enhancement in one 30 m pixel
IME_SCALE_KG_PER_PPB = 5.155e-3
REFERENCE_PIXEL_SIZE_M = 30.0
PPB_PER_PPM = 1000.0


class PlumeError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(PlumeError, ValueError):
    pass


class EmptyMaskError(InvalidInputError):
    pass


class ShapeMismatchError(InvalidInputError):
    pass


class ConfigurationError(PlumeError, ValueError):
    pass


class FormatError(PlumeError, ValueError):
    pass


def _frozen(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ConcentrationMap:
    """2-D grid of column methane enhancement in ppb."""

    values: np.ndarray
    pixel_size: float = REFERENCE_PIXEL_SIZE_M

    def __post_init__(self):
        v = _frozen(self.values)
        if v.ndim != 2 or v.shape[0] == 0 or v.shape[1] == 0:
            raise InvalidInputError(f"concentration map must be a non-empty 2-D grid, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("concentration map contains non-finite values")
        if np.any(v < 0):
            raise InvalidInputError("concentration map contains negative values")
        if not self.pixel_size > 0:
            raise InvalidInputError(f"pixel_size must be positive, got {self.pixel_size}")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @classmethod
    def zeros(cls, height: int, width: int, pixel_size: float = REFERENCE_PIXEL_SIZE_M) -> "ConcentrationMap":
        return cls(np.zeros((height, width)), pixel_size)


@dataclass(frozen=True)
class PlumeSnapshot:
    map: ConcentrationMap
    emission_rate: float
    wind_speed_u10: float
    sim_time: float = 0.0

    def __post_init__(self):
        for name in ("emission_rate", "wind_speed_u10", "sim_time"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise InvalidInputError(f"{name} must be finite and >= 0, got {val}")


@dataclass(frozen=True)
class HyperCube:
    """H x W x B radiance cube with per-band centre wavelength and FWHM (nm)."""

    radiance: np.ndarray
    band_centers: np.ndarray
    band_fwhm: np.ndarray

    def __post_init__(self):
        r = _frozen(self.radiance)
        c = _frozen(self.band_centers)
        f = _frozen(self.band_fwhm)
        if r.ndim != 3:
            raise InvalidInputError(f"radiance must be H x W x B, got shape {r.shape}")
        if c.shape != (r.shape[2],) or f.shape != (r.shape[2],):
            raise ShapeMismatchError("band metadata length does not match the band axis")
        if not np.all(np.isfinite(r)) or np.any(r <= 0):
            raise InvalidInputError("radiance must be finite and strictly positive")
        if c.size > 1 and np.any(np.diff(c) <= 0):
            raise InvalidInputError("band centres must be strictly increasing")
        if np.any(f <= 0):
            raise InvalidInputError("band FWHM must be positive")
        object.__setattr__(self, "radiance", r)
        object.__setattr__(self, "band_centers", c)
        object.__setattr__(self, "band_fwhm", f)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.radiance.shape

    @property
    def bands(self) -> int:
        return self.radiance.shape[2]

    def with_radiance(self, radiance: np.ndarray) -> "HyperCube":
        return HyperCube(radiance, self.band_centers, self.band_fwhm)


@dataclass(frozen=True)
class PlumeInstance:
    mask: np.ndarray
    bbox: Tuple[int, int, int, int] = field(default=None)
    emission_rate: Optional[float] = None
    #: detection confidence; classical segmenters use the instance IME
    score: Optional[float] = None
    #: sum of map values under the mask (ppb), filled in by segmentation
    pixel_sum: Optional[float] = None

    def __post_init__(self):
        m = _frozen(self.mask, dtype=bool)
        if m.ndim != 2:
            raise InvalidInputError("instance mask must be 2-D")
        box = enclosing_box(m)
        if self.bbox is not None and tuple(self.bbox) != box:
            raise InvalidInputError(f"bbox {self.bbox} is not the enclosing box {box} of the mask")
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "bbox", box)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class AbsorptionTable:
    """Methane absorption cross-section (cm^2/molecule) on a wavelength grid (nm)."""

    wavelengths: np.ndarray
    cross_sections: np.ndarray
    temperature: float = 296.0
    pressure: float = 97000.0

    def __post_init__(self):
        w = _frozen(self.wavelengths)
        s = _frozen(self.cross_sections)
        if w.ndim != 1 or w.shape != s.shape:
            raise ShapeMismatchError("wavelengths and cross_sections must be equal-length vectors")
        if w.size < 2:
            raise InvalidInputError("absorption table needs at least two grid points")
        if np.any(np.diff(w) <= 0):
            raise InvalidInputError("absorption wavelengths must be strictly increasing")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise InvalidInputError("cross sections must be finite and non-negative")
        object.__setattr__(self, "wavelengths", w)
        object.__setattr__(self, "cross_sections", s)

    def covers(self, lo: float = 1600.0, hi: float = 2450.0) -> bool:
        return self.wavelengths[0] <= lo and self.wavelengths[-1] >= hi


def ime_scale_for_pixel(pixel_size: float) -> float:
    """kg per ppb for a pixel of the given edge length (scales with pixel area)."""
    return IME_SCALE_KG_PER_PPB * (pixel_size / REFERENCE_PIXEL_SIZE_M) ** 2


def ime(cmap, k: float = IME_SCALE_KG_PER_PPB, mask: Optional[np.ndarray] = None) -> float:
    """Integrated mass enhancement in kg: ``k`` times the sum of pixel enhancements.

    ``cmap`` may be a :class:`ConcentrationMap` or a raw 2-D array.  When ``mask``
    is given only those pixels contribute.
    """
    if not k > 0:
        raise InvalidInputError(f"k must be positive, got {k}")
    values = cmap.values if isinstance(cmap, ConcentrationMap) else np.asarray(cmap, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("IME input contains non-finite pixels")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != values.shape:
            raise ShapeMismatchError(f"mask shape {mask.shape} != map shape {values.shape}")
        values = values[mask]
    # fsum is exactly rounded, so the result does not depend on pixel order
    return k * math.fsum(np.ravel(values).tolist())


def enclosing_box(mask: np.ndarray) -> Tuple[int, int, int, int]:
    """Minimum axis-aligned box ``(row_min, col_min, row_max, col_max)``, inclusive."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise InvalidInputError("mask must be 2-D")
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise EmptyMaskError("cannot box an empty mask")
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)
