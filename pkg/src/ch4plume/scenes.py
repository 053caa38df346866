"""Synthetic stand-ins for the external inputs: a methane cross-section table,
a 41-band EnMAP-like band set and textured base radiance cubes.

Real inputs can replace all three through the file formats in :mod:`ch4plume.io`.
"""
from __future__ import annotations

from importlib import resources
from typing import Tuple

import numpy as np
from scipy import ndimage

from .core import AbsorptionTable, HyperCube

ABSORPTION_CSV = "ch4_absorption_296K_97kPa.csv"


def enmap_like_bands() -> Tuple[np.ndarray, np.ndarray]:
    """41 SWIR band centres and FWHM (nm): 15 bands over the 1.65 um methane
    band and 26 over the 2.3 um band, water-vapour windows excluded."""
    centers = np.concatenate([np.arange(1605.0, 1746.0, 10.0), np.arange(2150.0, 2451.0, 12.0)])
    fwhm = np.full(centers.size, 10.0)
    return centers, fwhm


def _band_lines(center_wn, spacing, n_side, strength, rot_temp_scale):
    """P and R branch line positions (cm^-1) and relative strengths for one band."""
    j = np.arange(1, n_side + 1, dtype=np.float64)
    pop = j * np.exp(-j * (j + 1) / rot_temp_scale)
    pop /= pop.max()
    pos = np.concatenate([center_wn - spacing * j, center_wn + spacing * j, [center_wn]])
    amp = np.concatenate([pop, pop, [1.6]]) * strength
    return pos, amp


def synthetic_absorption_table(lo: float = 1550.0, hi: float = 2500.0, step: float = 0.5,
                               temperature: float = 296.0, pressure: float = 97000.0) -> AbsorptionTable:
    """Band-model methane cross sections: Lorentzian rotational lines around the
    2nu3 band (6005 cm^-1) and the nu2+nu3 / nu3+nu4 bands (4220-4440 cm^-1),
    with line widths smoothed to the table resolution."""
    wl = np.arange(lo, hi + step / 2, step)
    wn = 1e7 / wl
    sigma = np.zeros_like(wl)
    bands = [
        # centre cm^-1, line spacing, lines per branch, peak cm^2, rotational scale
        (6005.0, 10.5, 14, 2.2e-21, 60.0),
        (4320.0, 10.5, 18, 1.1e-20, 60.0),
        (4220.0, 10.5, 14, 4.0e-21, 60.0),
        (4440.0, 10.5, 12, 2.5e-21, 60.0),
    ]
    hwhm = 1.2  # cm^-1, wide enough to be resolved on a 0.5 nm grid
    for centre, spacing, n, peak, scale in bands:
        pos, amp = _band_lines(centre, spacing, n, peak, scale)
        for p, a in zip(pos, amp):
            sigma += a * hwhm ** 2 / ((wn - p) ** 2 + hwhm ** 2)
    # weak continuum-like wing under each band
    sigma += 1.5e-22 * np.exp(-0.5 * ((wn - 4320.0) / 90.0) ** 2)
    sigma += 4.0e-23 * np.exp(-0.5 * ((wn - 6005.0) / 70.0) ** 2)
    return AbsorptionTable(wl, sigma, temperature, pressure)


def default_absorption_table() -> AbsorptionTable:
    """The shipped table (generated once by :func:`synthetic_absorption_table`)."""
    from .io import read_absorption_csv

    with resources.as_file(resources.files("ch4plume") / "data" / ABSORPTION_CSV) as path:
        return read_absorption_csv(path)


def _smooth_field(rng, shape, length_px):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), length_px, mode="wrap")
    return f / f.std()


def _endmembers(rng, wavelengths, n):
    """Smooth random reflectance spectra in (0.05, 0.6)."""
    x = (wavelengths - wavelengths.min()) / np.ptp(wavelengths)
    spectra = []
    for _ in range(n):
        coeffs = rng.normal(0.0, 1.0, 4)
        base = rng.uniform(0.12, 0.4)
        s = base * (1.0 + 0.25 * np.polynomial.legendre.legval(2 * x - 1, coeffs) / 4.0)
        spectra.append(np.clip(s, 0.05, 0.6))
    return np.array(spectra)


def solar_path_radiance(wavelengths) -> np.ndarray:
    """Smooth at-sensor radiance for unit reflectance (arbitrary linear units)."""
    wl_um = np.asarray(wavelengths) / 1000.0
    # Planck-like solar shape times a mild broadband atmospheric transmission
    planck = wl_um ** -5 / (np.exp(2.5 / wl_um) - 1.0)
    planck /= planck.max()
    atm = 0.85 - 0.08 * np.exp(-0.5 * ((wl_um - 1.9) / 0.12) ** 2)
    return 120.0 * planck * atm


def synthetic_base_cube(height: int, width: int, rng: np.random.Generator, centers=None, fwhm=None,
                        n_endmembers: int = 4, snr: float = 600.0, texture_px: float = 12.0,
                        sharpness: float = 12.0, brightness_var: float = 0.02) -> HyperCube:
    """Textured base radiance: a few smooth surface classes mixed by spatially
    correlated abundances, plus Gaussian sensor noise at the given SNR.

    ``sharpness`` scales the abundance logits (large values give nearly pure
    class patches); ``brightness_var`` is the relative std of an albedo field.
    """
    if centers is None:
        centers, fwhm = enmap_like_bands()
    centers = np.asarray(centers, dtype=np.float64)
    fwhm = np.asarray(fwhm, dtype=np.float64)
    spectra = _endmembers(rng, centers, n_endmembers)
    logits = np.stack([sharpness * _smooth_field(rng, (height, width), texture_px) for _ in range(n_endmembers)], -1)
    ab = np.exp(logits - logits.max(axis=-1, keepdims=True))
    ab /= ab.sum(axis=-1, keepdims=True)
    brightness = 1.0 + brightness_var * _smooth_field(rng, (height, width), texture_px / 2)
    reflect = (ab @ spectra) * brightness[..., None]
    radiance = reflect * solar_path_radiance(centers)
    radiance = radiance * (1.0 + rng.standard_normal(radiance.shape) / snr)
    radiance = np.maximum(radiance, 1e-6)
    return HyperCube(radiance, centers, fwhm)
