"""File formats: raw little-endian float32 rasters with JSON sidecars,
the absorption-table CSV, and run-length encoded masks.
"""
from __future__ import annotations

import csv
import functools
import json
import os
import subprocess
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .core import (AbsorptionTable, ConcentrationMap, FormatError, HyperCube,
                   PlumeSnapshot)

F32 = np.dtype("<f4")

SNAPSHOT_FIELDS = ("height", "width", "pixel_size_m", "unit", "emission_rate_kgph",
                   "wind_u10_mps", "sim_time_s")
CUBE_FIELDS = ("height", "width", "bands", "band_centers_nm", "band_fwhm_nm")


def stem_of(path) -> Path:
    """Raster stem: the path without a trailing ``.f32`` or ``.json`` (other dots are kept)."""
    path = Path(path)
    if path.suffix in (".f32", ".json"):
        return path.with_name(path.name[: -len(path.suffix)])
    return path


def with_ext(stem, ext: str) -> Path:
    stem = Path(stem)
    return stem.with_name(stem.name + ext)


def write_json(path, obj) -> None:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1, allow_nan=False)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_raster(stem, array: np.ndarray, meta: Dict) -> Tuple[Path, Path]:
    """Write ``<stem>.f32`` (C-order, little-endian float32) and ``<stem>.json``."""
    stem = stem_of(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    raw = with_ext(stem, ".f32")
    side = with_ext(stem, ".json")
    np.ascontiguousarray(array, dtype=F32).tofile(raw)
    write_json(side, meta)
    return raw, side


def _read_raw(raw: Path, shape: Sequence[int]) -> np.ndarray:
    data = np.fromfile(raw, dtype=F32)
    if data.size != int(np.prod(shape)):
        raise FormatError(f"{raw}: expected {int(np.prod(shape))} float32 values, found {data.size}")
    return data.reshape(shape)


def _sidecar(stem: Path, required: Sequence[str]) -> Dict:
    side = with_ext(stem, ".json")
    try:
        meta = read_json(side)
    except FileNotFoundError:
        raise FormatError(f"{side}: sidecar missing") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{side}: invalid JSON ({exc})") from None
    missing = [k for k in required if k not in meta]
    if missing:
        raise FormatError(f"{side}: missing metadata field(s) {missing}")
    return meta


def write_map(stem, cmap: ConcentrationMap, extra: Dict = None):
    meta = {"height": cmap.height, "width": cmap.width, "pixel_size_m": float(cmap.pixel_size), "unit": "ppb"}
    meta.update(extra or {})
    return write_raster(stem, cmap.values, meta)


def read_map(stem) -> Tuple[ConcentrationMap, Dict]:
    stem = stem_of(stem)
    meta = _sidecar(stem, ("height", "width", "pixel_size_m"))
    values = _read_raw(with_ext(stem, ".f32"), (meta["height"], meta["width"]))
    if not np.all(np.isfinite(values)):
        raise FormatError(f"{stem}.f32: non-finite pixel values")
    if np.any(values < 0):
        raise FormatError(f"{stem}.f32: negative concentration values")
    return ConcentrationMap(values.astype(np.float64), float(meta["pixel_size_m"])), meta


def write_snapshot(stem, snap: PlumeSnapshot):
    return write_map(stem, snap.map, {
        "emission_rate_kgph": float(snap.emission_rate),
        "wind_u10_mps": float(snap.wind_speed_u10),
        "sim_time_s": float(snap.sim_time),
    })


def read_snapshot(stem) -> PlumeSnapshot:
    stem = stem_of(stem)
    meta = _sidecar(stem, SNAPSHOT_FIELDS)
    if meta["unit"] != "ppb":
        raise FormatError(f"{stem}.json: unit must be 'ppb', got {meta['unit']!r}")
    cmap, _ = read_map(stem)
    try:
        return PlumeSnapshot(cmap, float(meta["emission_rate_kgph"]), float(meta["wind_u10_mps"]),
                             float(meta["sim_time_s"]))
    except ValueError as exc:
        raise FormatError(f"{stem}.json: {exc}") from None


def write_cube(stem, cube: HyperCube):
    """Band-sequential: the file holds B planes of H x W."""
    h, w, b = cube.shape
    meta = {"height": h, "width": w, "bands": b,
            "band_centers_nm": [float(x) for x in cube.band_centers],
            "band_fwhm_nm": [float(x) for x in cube.band_fwhm]}
    return write_raster(stem, np.moveaxis(cube.radiance, 2, 0), meta)


def read_cube(stem) -> HyperCube:
    stem = stem_of(stem)
    meta = _sidecar(stem, CUBE_FIELDS)
    data = _read_raw(with_ext(stem, ".f32"), (meta["bands"], meta["height"], meta["width"]))
    try:
        return HyperCube(np.moveaxis(data, 0, 2).astype(np.float64),
                         np.asarray(meta["band_centers_nm"], float), np.asarray(meta["band_fwhm_nm"], float))
    except ValueError as exc:
        raise FormatError(f"{stem}: {exc}") from None


def list_stems(directory) -> List[Path]:
    """Raster stems (``.f32`` with a matching ``.json``) in a directory, sorted by name."""
    directory = Path(directory)
    return sorted(stem_of(p) for p in directory.glob("*.f32"))


def read_absorption_csv(path) -> AbsorptionTable:
    """Read ``wavelength_nm,cross_section_cm2`` plus an optional sidecar JSON
    ``{temperature_K, pressure_Pa}`` next to it."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["wavelength_nm", "cross_section_cm2"]:
            raise FormatError(f"{path}: header must be 'wavelength_nm,cross_section_cm2'")
        rows = [(float(a), float(b)) for a, b in reader]
    arr = np.asarray(rows, dtype=np.float64)
    meta = {}
    side = path.with_suffix(".json")
    if side.exists():
        meta = read_json(side)
    try:
        return AbsorptionTable(arr[:, 0], arr[:, 1], float(meta.get("temperature_K", 296.0)),
                               float(meta.get("pressure_Pa", 97000.0)))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_absorption_csv(path, table: AbsorptionTable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("wavelength_nm,cross_section_cm2\n")
        for w, s in zip(table.wavelengths, table.cross_sections):
            fh.write(f"{float(w)!r},{float(s)!r}\n")
    write_json(path.with_suffix(".json"), {"temperature_K": table.temperature, "pressure_Pa": table.pressure})


def rle_encode(mask: np.ndarray) -> Dict:
    """Row-major run-length encoding; runs alternate starting with a run of False."""
    mask = np.asarray(mask, dtype=bool)
    flat = mask.ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return {"size": list(mask.shape), "counts": [int(r) for r in runs]}


def rle_decode(rle: Dict) -> np.ndarray:
    shape = tuple(rle["size"])
    counts = rle["counts"]
    if sum(counts) != int(np.prod(shape)):
        raise FormatError("RLE counts do not cover the mask size")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(shape)


@functools.lru_cache(maxsize=1)
def tool_version() -> str:
    """Package version, plus ``git describe`` output when run from a checkout."""
    from . import __version__
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                              capture_output=True, text=True, timeout=10)
        tail = desc.stdout.strip() if desc.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        tail = ""
    return f"ch4plume {__version__}" + (f" ({tail})" if tail else "")


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
