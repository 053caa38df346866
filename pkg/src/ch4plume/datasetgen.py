"""Three-subset dataset generation: single augmented plumes with a rate label,
noisy multi-plume maps with instance labels, and plume-injected radiance cubes
with the multi-plume map as label.

Every sample draws its random numbers from a stream derived from
``(master seed, subset, split, index)``, so the output does not depend on the
number of worker threads.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import io as _io
from .core import (AbsorptionTable, ConcentrationMap, ConfigurationError,
                   HyperCube, InvalidInputError, PlumeError, PlumeInstance,
                   PlumeSnapshot, ShapeMismatchError, ime)
from .seeding import derive_seed, rng_for
from .spectral import SpectralResponse, inject, transmittance_cube

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
VAL_WINDS = (2.0, 10.0)
TEST_WINDS = (1.0, 9.0)
DEFAULT_MAX_OVERLAP = 0.15
DEFAULT_NOISE_SIGMA = 35.0
PLACEMENT_ATTEMPTS = 1000


class DegeneratePlumeError(PlumeError, ValueError):
    pass


class UndefinedRatioError(PlumeError, ValueError):
    pass


class PlacementExhaustedError(PlumeError, RuntimeError):
    pass


def split_for_wind(u10: float) -> str:
    if any(math.isclose(u10, w) for w in VAL_WINDS):
        return "val"
    if any(math.isclose(u10, w) for w in TEST_WINDS):
        return "test"
    return "train"


@dataclass(frozen=True)
class AugmentSpec:
    scale: float = 1.0
    #: pixels below ``zero_threshold * max`` are zeroed; None draws it from U(0.05, 0.10)
    zero_threshold: Optional[float] = None
    rotation: float = 0.0
    seed: int = 0

    def resolved_threshold(self) -> float:
        if self.zero_threshold is not None:
            return float(self.zero_threshold)
        return float(np.random.default_rng(self.seed).uniform(0.05, 0.10))

    def validate(self) -> "AugmentSpec":
        if not self.scale > 0:
            raise ConfigurationError(f"scale must be positive, got {self.scale}")
        if self.zero_threshold is not None and not 0.05 <= self.zero_threshold <= 0.10:
            raise ConfigurationError(f"zero_threshold must lie in [0.05, 0.10], got {self.zero_threshold}")
        if not -170.0 <= self.rotation <= 170.0:
            raise ConfigurationError(f"rotation must lie in [-170, 170] degrees, got {self.rotation}")
        return self

    @classmethod
    def random(cls, rng: np.random.Generator, scale_range=(0.5, 2.0)) -> "AugmentSpec":
        return cls(scale=float(rng.uniform(*scale_range)), zero_threshold=float(rng.uniform(0.05, 0.10)),
                   rotation=float(rng.uniform(-170.0, 170.0)), seed=int(rng.integers(2 ** 63)))


def _centre_support(values: np.ndarray) -> np.ndarray:
    """Integer shift that moves the support's bounding-box centre to the image centre."""
    rows, cols = np.nonzero(values)
    h, w = values.shape
    dr = (h - 1) // 2 - (rows.min() + rows.max()) // 2
    dc = (w - 1) // 2 - (cols.min() + cols.max()) // 2
    out = np.zeros_like(values)
    src_r = slice(max(0, -dr), min(h, h - dr))
    src_c = slice(max(0, -dc), min(w, w - dc))
    dst_r = slice(max(0, dr), min(h, h + dr))
    dst_c = slice(max(0, dc), min(w, w + dc))
    out[dst_r, dst_c] = values[src_r, src_c]
    return out


def rotate_map(values: np.ndarray, degrees: float) -> np.ndarray:
    """Counter-clockwise rotation about the image centre, bilinear with zero
    fill.  Multiples of 90 degrees on square grids are exact permutations."""
    values = np.asarray(values, dtype=np.float64)
    quarter = degrees / 90.0
    if values.shape[0] == values.shape[1] and float(quarter).is_integer():
        return np.rot90(values, int(quarter) % 4).copy()
    out = ndimage.rotate(values, degrees, reshape=False, order=1, mode="constant", cval=0.0)
    # bilinear weights are convex, but keep exact zeros and non-negativity
    out[out < 1e-12 * max(values.max(), 1.0)] = 0.0
    return out


def augment_single(snapshot: PlumeSnapshot, spec: AugmentSpec) -> Tuple[ConcentrationMap, float]:
    """Scale by ``a``, zero pixels below the threshold fraction of the maximum,
    then rotate about the plume's box centre.  Returns the map and the rate
    label ``m * a``."""
    spec.validate()
    v = snapshot.map.values * spec.scale
    peak = v.max()
    if not peak > 0:
        raise DegeneratePlumeError("snapshot is all zero")
    v = np.where(v >= spec.resolved_threshold() * peak, v, 0.0)
    if spec.rotation != 0.0:
        v = rotate_map(_centre_support(v), spec.rotation)
    if not v.any():
        raise DegeneratePlumeError("augmentation removed every pixel")
    return ConcentrationMap(v, snapshot.map.pixel_size), snapshot.emission_rate * spec.scale


def overlap_ratio(a, b) -> float:
    """Sum of the max map over the joint support divided by its sum over the
    union of supports (support = pixel > 0)."""
    va = a.values if isinstance(a, ConcentrationMap) else np.asarray(a, dtype=np.float64)
    vb = b.values if isinstance(b, ConcentrationMap) else np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise ShapeMismatchError(f"map shapes differ: {va.shape} vs {vb.shape}")
    m = np.maximum(va, vb)
    union = float(m[(va > 0) | (vb > 0)].sum())
    if union == 0:
        raise UndefinedRatioError("both maps are all zero")
    return float(m[(va > 0) & (vb > 0)].sum()) / union


def _crop(values: np.ndarray) -> np.ndarray:
    rows, cols = np.nonzero(values)
    return values[rows.min():rows.max() + 1, cols.min():cols.max() + 1]


def composite(plumes: Sequence, canvas: Tuple[int, int] = (256, 256), max_overlap: float = DEFAULT_MAX_OVERLAP,
              rng: Optional[np.random.Generator] = None, rates: Optional[Sequence[float]] = None,
              pixel_size: float = 30.0, attempts: int = PLACEMENT_ATTEMPTS, return_layers: bool = False):
    """Place the bounding-box crops of up to three plume maps at random offsets
    on a zero canvas.  A new offset is drawn for a plume until its overlap
    ratio with every placed plume is at most ``max_overlap``; overlapping
    values add.  Returns the summed map and one instance per plume, plus the
    placed per-plume layers when ``return_layers`` is set."""
    if len(plumes) > 3:
        raise ConfigurationError(f"at most 3 plumes per composite, got {len(plumes)}")
    if not 0.0 <= max_overlap <= 1.0:
        raise ConfigurationError("max_overlap must lie in [0, 1]")
    rng = np.random.default_rng(0) if rng is None else rng
    rates = [None] * len(plumes) if rates is None else list(rates)
    h, w = canvas
    placed: List[np.ndarray] = []
    for idx, p in enumerate(plumes):
        values = p.values if isinstance(p, ConcentrationMap) else np.asarray(p, dtype=np.float64)
        crop = _crop(values)
        ch, cw = crop.shape
        if ch > h or cw > w:
            raise ConfigurationError(f"plume {idx} ({ch}x{cw}) does not fit the {h}x{w} canvas")
        for _ in range(attempts):
            r = int(rng.integers(0, h - ch + 1))
            c = int(rng.integers(0, w - cw + 1))
            layer = np.zeros((h, w))
            layer[r:r + ch, c:c + cw] = crop
            if all(overlap_ratio(layer, q) <= max_overlap for q in placed):
                placed.append(layer)
                break
        else:
            raise PlacementExhaustedError(f"plume {idx} could not be placed in {attempts} attempts")
    total = np.zeros((h, w))
    for layer in placed:
        total += layer
    instances = [PlumeInstance(layer > 0, emission_rate=rate, pixel_sum=float(layer.sum()))
                 for layer, rate in zip(placed, rates)]
    if return_layers:
        return ConcentrationMap(total, pixel_size), instances, placed
    return ConcentrationMap(total, pixel_size), instances


def add_noise(cmap: ConcentrationMap, sigma: float = DEFAULT_NOISE_SIGMA, seed: int = 0) -> ConcentrationMap:
    """Additive white Gaussian noise, clamped at zero."""
    if sigma < 0:
        raise ConfigurationError("noise sigma must be >= 0")
    if sigma == 0:
        return cmap
    rng = np.random.default_rng(seed)
    noisy = cmap.values + rng.normal(0.0, sigma, cmap.shape)
    return ConcentrationMap(np.maximum(noisy, 0.0), cmap.pixel_size)


@dataclass(frozen=True)
class DatasetConfig:
    #: samples per split for every subset
    samples: Dict[str, int] = field(default_factory=lambda: {"train": 8, "val": 2, "test": 2})
    subsets: Tuple[str, ...] = ("rate", "seg", "inv")
    scale_range: Tuple[float, float] = (2.0, 4.0)
    max_plumes: int = 3
    max_overlap: float = DEFAULT_MAX_OVERLAP
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    #: generation-time label filters: IME in kg and pixel area
    label_ime_min: float = 300.0
    label_area_min: int = 300
    max_redraws: int = 100

    def validate(self) -> "DatasetConfig":
        for s in self.samples:
            if s not in SPLITS:
                raise ConfigurationError(f"unknown split {s!r}")
            if self.samples[s] < 0:
                raise ConfigurationError(f"samples.{s} must be >= 0")
        for s in self.subsets:
            if s not in ("rate", "seg", "inv"):
                raise ConfigurationError(f"unknown subset {s!r}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigurationError("scale_range must satisfy 0 < lo <= hi")
        if not 0 <= self.max_plumes <= 3:
            raise ConfigurationError("max_plumes must lie in [0, 3]")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        return self


@dataclass(frozen=True)
class SpectralSetup:
    table: AbsorptionTable
    srf: SpectralResponse
    air_column: float


class DatasetGenerator:
    """Holds the plume and base-map stores grouped by split."""

    def __init__(self, snapshots: Sequence[PlumeSnapshot], base_maps: Sequence[HyperCube],
                 spectral: Optional[SpectralSetup], config: DatasetConfig = DatasetConfig(), master_seed: int = 0):
        self.config = config.validate()
        self.master_seed = int(master_seed)
        self.spectral = spectral
        self.plumes: Dict[str, List[PlumeSnapshot]] = {s: [] for s in SPLITS}
        for snap in snapshots:
            self.plumes[split_for_wind(snap.wind_speed_u10)].append(snap)
        # base maps are shuffled once and dealt round-robin to the splits
        self.bases: Dict[str, List[int]] = {s: [] for s in SPLITS}
        order = rng_for(master_seed, "basemaps").permutation(len(base_maps))
        for pos, i in enumerate(order):
            self.bases[SPLITS[pos % 3]].append(int(i))
        self.base_maps = list(base_maps)
        shapes = {s.map.shape for s in snapshots}
        if len(shapes) > 1:
            raise ShapeMismatchError(f"snapshots have differing shapes {sorted(shapes)}")
        self.canvas = shapes.pop() if shapes else (256, 256)
        self.pixel_size = snapshots[0].map.pixel_size if snapshots else 30.0

    def _check_store(self, split: str, need_base: bool):
        if not self.plumes[split]:
            raise ConfigurationError(f"no plume snapshots available for split {split!r}")
        if need_base and not self.bases[split]:
            raise ConfigurationError(f"no base maps available for split {split!r}")

    def draw_plume(self, split: str, rng: np.random.Generator) -> Tuple[ConcentrationMap, float, float]:
        """An augmented plume passing the label filters: ``(map, rate, u10)``."""
        cfg = self.config
        store = self.plumes[split]
        for _ in range(cfg.max_redraws):
            snap = store[int(rng.integers(len(store)))]
            spec = AugmentSpec.random(rng, cfg.scale_range)
            try:
                cmap, rate = augment_single(snap, spec)
            except DegeneratePlumeError:
                continue
            if ime(cmap) >= cfg.label_ime_min and int((cmap.values > 0).sum()) >= cfg.label_area_min:
                return cmap, rate, snap.wind_speed_u10
        raise DegeneratePlumeError(f"no plume in split {split!r} passed the label filters "
                                   f"after {cfg.max_redraws} draws")

    def multi_plume(self, split: str, index: int, return_layers: bool = False):
        """Composite shared by the segmentation and inversion samples of one
        index: ``(map, instances, winds)``, plus the per-plume layers when
        ``return_layers`` is set."""
        rng = rng_for(self.master_seed, "composite", SPLITS.index(split), index)
        n = int(rng.integers(0, self.config.max_plumes + 1))
        drawn = [self.draw_plume(split, rng) for _ in range(n)]
        cmap, instances, layers = composite([d[0] for d in drawn], self.canvas, self.config.max_overlap, rng,
                                            rates=[d[1] for d in drawn], pixel_size=self.pixel_size,
                                            return_layers=True)
        winds = [d[2] for d in drawn]
        if return_layers:
            return cmap, instances, winds, layers
        return cmap, instances, winds

    def rate_sample(self, split: str, index: int):
        rng = rng_for(self.master_seed, "rate", SPLITS.index(split), index)
        return self.draw_plume(split, rng)

    def seg_sample(self, split: str, index: int):
        cmap, instances, winds = self.multi_plume(split, index)
        seed = derive_seed(self.master_seed, "noise", SPLITS.index(split), index)
        return add_noise(cmap, self.config.noise_sigma, seed), instances, winds

    def inv_sample(self, split: str, index: int):
        """``(cube, label map, instances, base index, winds)``; an empty
        composite yields the raw base map."""
        if self.spectral is None:
            raise ConfigurationError("inversion samples need a spectral setup")
        cmap, instances, winds = self.multi_plume(split, index)
        rng = rng_for(self.master_seed, "base", SPLITS.index(split), index)
        pool = self.bases[split]
        b = pool[int(rng.integers(len(pool)))]
        base = self.base_maps[b]
        if base.shape[:2] != cmap.shape:
            raise ShapeMismatchError(f"base map {b} is {base.shape[:2]}, plume canvas is {cmap.shape}")
        if not cmap.values.any():
            return base, cmap, instances, b, winds
        sp = self.spectral
        t = transmittance_cube(cmap, sp.table, sp.srf, sp.air_column, by_column=True)
        return inject(base, t), cmap, instances, b, winds


def _sample_id(subset: str, split: str, index: int) -> str:
    return f"{subset}_{split}_{index:05d}"


def generate_dataset(generator: DatasetGenerator, out_dir, threads: int = 1) -> Dict:
    """Write the dataset tree under ``out_dir`` and return the manifest."""
    cfg = generator.config
    out = _io.ensure_dir(out_dir)
    jobs = []
    for subset in cfg.subsets:
        for split in SPLITS:
            n = cfg.samples.get(split, 0)
            if n:
                generator._check_store(split, need_base=subset == "inv")
            jobs.extend((subset, split, i) for i in range(n))

    def run(job):
        subset, split, i = job
        sid = _sample_id(subset, split, i)
        try:
            return job, _make_sample(generator, subset, split, i, out / subset / split, sid)
        except PlumeError as exc:
            raise type(exc)(f"sample {sid}: {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    manifest = {"master_seed": generator.master_seed, "tool_version": _io.tool_version(),
                "config": config_dict(cfg), "splits": {s: [] for s in SPLITS}}
    labels: Dict[Tuple[str, str], Dict] = {}
    for (subset, split, i), (entry, label) in results:
        manifest["splits"][split].append(entry)
        if label is not None:
            labels.setdefault((subset, split), {})[entry["id"]] = label
    for (subset, split), lab in sorted(labels.items()):
        _io.write_json(out / subset / split / "labels.json", lab)
    _io.write_json(out / "manifest.json", manifest)
    return manifest


def config_dict(cfg: DatasetConfig) -> Dict:
    d = asdict(cfg)
    d["subsets"] = list(cfg.subsets)
    d["scale_range"] = list(cfg.scale_range)
    d["samples"] = {k: int(v) for k, v in sorted(cfg.samples.items())}
    return d


def _make_sample(gen: DatasetGenerator, subset: str, split: str, i: int, directory: Path, sid: str):
    stem = directory / sid
    entry = {"id": sid, "subset": subset, "split": split}
    if subset == "rate":
        cmap, rate, wind = gen.rate_sample(split, i)
        _io.write_map(stem, cmap, {"emission_rate_kgph": rate, "wind_u10_mps": wind})
        entry.update(files=[f"{subset}/{split}/{sid}.f32"], winds=[wind], emission_rate_kgph=rate)
        return entry, None
    if subset == "seg":
        noisy, instances, winds = gen.seg_sample(split, i)
        _io.write_map(stem, noisy, {"plumes": len(instances)})
        entry.update(files=[f"{subset}/{split}/{sid}.f32"], winds=winds)
        return entry, instance_labels(instances, winds)
    cube, label_map, instances, base_index, winds = gen.inv_sample(split, i)
    _io.write_cube(stem, cube)
    _io.write_map(directory / f"{sid}_label", label_map)
    entry.update(files=[f"{subset}/{split}/{sid}.f32", f"{subset}/{split}/{sid}_label.f32"],
                 winds=winds, base_map=base_index)
    return entry, instance_labels(instances, winds)


def instance_labels(instances: Sequence[PlumeInstance], winds: Sequence[float]) -> List[Dict]:
    """JSON records ``{rle_mask, bbox, rate_kgph, wind_u10_mps, pixel_sum}``."""
    return [{"rle_mask": _io.rle_encode(inst.mask), "bbox": list(inst.bbox),
             "rate_kgph": inst.emission_rate, "wind_u10_mps": u,
             "pixel_sum": inst.pixel_sum} for inst, u in zip(instances, winds)]


def instances_from_records(records: Sequence[Dict]) -> List[PlumeInstance]:
    """Inverse of :func:`instance_labels` (also reads instance-output records,
    whose optional ``score`` becomes the detection confidence)."""
    out = []
    for rec in records:
        mask = _io.rle_decode(rec["rle_mask"])
        out.append(PlumeInstance(mask, tuple(rec["bbox"]), rec.get("rate_kgph"), score=rec.get("score"),
                                 pixel_sum=rec.get("pixel_sum")))
    return out


def load_labels(directory, sample_id: str) -> List[PlumeInstance]:
    """Instances of one sample from its split's ``labels.json``."""
    labels = _io.read_json(Path(directory) / "labels.json")
    if sample_id not in labels:
        raise InvalidInputError(f"{sample_id}: no labels in {directory}")
    return instances_from_records(labels[sample_id])
