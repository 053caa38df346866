"""Concentration map -> band transmittance cube -> injected radiance, plus the
log/10 image normalisation.

Every operation is per pixel, so processing the image one column at a time
(as the dataset procedure does) gives the same result as whole-image calls.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize

from .core import (AbsorptionTable, ConcentrationMap, HyperCube,
                   InvalidInputError, ShapeMismatchError)

BOLTZMANN = 1.380649e-23      # J/K
FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))
PPB = 1e-9


class CoverageError(InvalidInputError):
    pass


def mean_air_column(temperature: float = 296.0, pressure: float = 97000.0, path_m: float = 3000.0) -> float:
    """Dry-air molecules per cm^2 over ``path_m`` at the ideal-gas number density."""
    n_per_m3 = pressure / (BOLTZMANN * temperature)
    return n_per_m3 * path_m * 1e-4


AIR_COLUMN = mean_air_column()


@dataclass(frozen=True)
class SpectralResponse:
    centers: np.ndarray
    fwhm: np.ndarray
    grid: np.ndarray
    #: B x K, each row sums to 1
    weights: np.ndarray

    @property
    def bands(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class TransmittanceCube:
    values: np.ndarray
    band_centers: np.ndarray
    band_fwhm: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise InvalidInputError("transmittance cube must be H x W x B")
        if np.any(v <= 0) or np.any(v > 1):
            raise InvalidInputError("transmittance values must lie in (0, 1]")
        object.__setattr__(self, "values", v)

    @classmethod
    def ones(cls, height, width, centers, fwhm) -> "TransmittanceCube":
        return cls(np.ones((height, width, len(centers))), np.asarray(centers), np.asarray(fwhm))


def build_srf(centers, fwhm, grid) -> SpectralResponse:
    """Gaussian band responses sampled on ``grid`` and normalised to unit sum."""
    centers = np.atleast_1d(np.asarray(centers, dtype=np.float64))
    fwhm = np.atleast_1d(np.asarray(fwhm, dtype=np.float64))
    grid = np.atleast_1d(np.asarray(grid, dtype=np.float64))
    if centers.shape != fwhm.shape:
        raise ShapeMismatchError("centers and fwhm must have equal length")
    if np.any(fwhm <= 0):
        raise InvalidInputError("fwhm must be positive")
    if np.any(centers < grid[0]) or np.any(centers > grid[-1]):
        raise CoverageError(f"band centres must lie within the grid span [{grid[0]}, {grid[-1]}] nm")
    sigma = fwhm * FWHM_TO_SIGMA
    w = np.exp(-0.5 * ((grid[None, :] - centers[:, None]) / sigma[:, None]) ** 2)
    sums = w.sum(axis=1, keepdims=True)
    if np.any(sums == 0):
        raise CoverageError("a band response underflows everywhere on the grid")
    return SpectralResponse(centers, fwhm, grid, w / sums)


def optical_depth(column, table: AbsorptionTable, air_column: float = AIR_COLUMN) -> np.ndarray:
    """tau(lambda) = cross_section * column[ppb] * 1e-9 * air_column.

    ``column`` may be a scalar or an array; the wavelength axis is appended last.
    """
    column = np.asarray(column, dtype=np.float64)
    if np.any(column < 0) or not np.all(np.isfinite(column)):
        raise InvalidInputError("column enhancement must be finite and >= 0")
    return (column * (PPB * air_column))[..., None] * table.cross_sections


def transmittance(tau) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0):
        raise InvalidInputError("optical depth must be >= 0")
    return np.exp(-tau)


def band_convolve(t_highres, srf: SpectralResponse) -> np.ndarray:
    """Weighted band means of a high-resolution spectrum (last axis is wavelength)."""
    t = np.asarray(t_highres, dtype=np.float64)
    if t.shape[-1] != srf.weights.shape[1]:
        raise ShapeMismatchError(f"spectrum has {t.shape[-1]} samples, SRF grid has {srf.weights.shape[1]}")
    return t @ srf.weights.T


def unit_depth(table: AbsorptionTable, srf: SpectralResponse, air_column: float = AIR_COLUMN) -> np.ndarray:
    """Band-convolved optical depth per ppb of enhancement."""
    return band_convolve(optical_depth(1.0, table, air_column), srf)


def _pixel_transmittance(values: np.ndarray, table, srf, air_column, chunk: int = 256) -> np.ndarray:
    # one matrix-vector product per pixel: a batched product may round
    # differently depending on the batch size, which would make the result
    # depend on how the image is split up
    out = np.ones(values.shape + (srf.bands,))
    idx = np.flatnonzero(values > 0)
    flat_in = values.reshape(-1)
    flat_out = out.reshape(-1, srf.bands)
    for start in range(0, idx.size, chunk):
        sel = idx[start:start + chunk]
        t = transmittance(optical_depth(flat_in[sel], table, air_column))
        for row, p in zip(t, sel):
            flat_out[p] = srf.weights @ row
    return out


def transmittance_cube(cmap: ConcentrationMap, table: AbsorptionTable, srf: SpectralResponse,
                       air_column: float = AIR_COLUMN, by_column: bool = True) -> TransmittanceCube:
    """Band transmittance for every pixel.  Zero pixels get exactly 1; with
    ``by_column`` the image is processed one column at a time and columns
    without methane are skipped."""
    values = cmap.values
    h, w = values.shape
    if not by_column:
        cube = _pixel_transmittance(values, table, srf, air_column)
    else:
        cube = np.ones((h, w, srf.bands))
        for j in np.flatnonzero(values.any(axis=0)):
            cube[:, j, :] = _pixel_transmittance(values[:, j], table, srf, air_column)
    # strong absorption can underflow to 0; keep the (0, 1] contract
    np.clip(cube, np.finfo(np.float64).tiny, 1.0, out=cube)
    return TransmittanceCube(cube, srf.centers, srf.fwhm)


def inject(base: HyperCube, t_plume: TransmittanceCube) -> HyperCube:
    """Element-wise product of base radiance and plume transmittance."""
    t = t_plume.values if isinstance(t_plume, TransmittanceCube) else np.asarray(t_plume, dtype=np.float64)
    if t.shape != base.shape:
        raise ShapeMismatchError(f"transmittance shape {t.shape} != cube shape {base.shape}")
    return base.with_radiance(base.radiance * t)


def preprocess(cube, check_range: bool = False) -> np.ndarray:
    """Natural log divided by 10.  With ``check_range`` assert the result lies in [0, 1]."""
    r = cube.radiance if isinstance(cube, HyperCube) else np.asarray(cube, dtype=np.float64)
    if np.any(r <= 0):
        raise InvalidInputError("log preprocessing needs strictly positive radiance")
    out = np.log(r) / 10.0
    if check_range:
        assert out.min() >= 0.0 and out.max() <= 1.0, "preprocessed values fall outside [0, 1]"
    return out


def retrieve_enhancement(band_t, table: AbsorptionTable, srf: SpectralResponse,
                         air_column: float = AIR_COLUMN, upper: Optional[float] = None) -> float:
    """Invert the forward chain for one pixel: the enhancement (ppb) whose band
    transmittance best matches ``band_t`` in least squares of log transmittance."""
    band_t = np.asarray(band_t, dtype=np.float64)
    if np.all(band_t >= 1.0):
        return 0.0
    target = np.log(band_t)

    def resid(c):
        model = band_convolve(transmittance(optical_depth(max(c, 0.0), table, air_column)), srf)
        return float(np.sum((np.log(model) - target) ** 2))

    d = unit_depth(table, srf, air_column)
    guess = float(-(target @ d) / (d @ d))
    hi = upper if upper is not None else max(10.0 * guess, 100.0)
    res = optimize.minimize_scalar(resid, bounds=(0.0, hi), method="bounded",
                                   options={"xatol": 1e-6 * max(guess, 1.0)})
    return float(res.x)
