"""Command-line driver for the pipeline stages.

Every subcommand takes ``--config PATH`` (YAML), ``--seed N``, ``--out DIR`` and
``--threads N`` and writes ``run.json`` (resolved configuration and tool
version) into each directory it creates.  Exit status: 0 on success, 1 on a
processing error, 2 on a bad configuration, 3 on an input/output error.
"""
from __future__ import annotations

import argparse
import copy
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import datasetgen, evaluation, inversion, objectives, plumeops, plumesim, scenes, spectral
from . import io as _io
from .core import (ConcentrationMap, ConfigurationError, FormatError, PlumeError, PlumeInstance,
                   ime_scale_for_pixel, mask_iou)
from .seeding import derive_seed, rng_for

logger = logging.getLogger("ch4plume")

EXIT_ERROR, EXIT_CONFIG, EXIT_IO = 1, 2, 3

DEFAULTS: Dict = {
    "seed": 0,
    "threads": 1,
    "paths": {"snapshots": None, "base_maps": None},
    "sim": {
        "height": 256, "width": 256, "pixel_size": 30.0,
        "eddy_diffusivity": 15.0, "turbulence_intensity": 0.3, "turbulence_timescale": 30.0,
        "duration": 9000.0, "snapshot_interval": 30.0, "snapshot_start": 3600.0,
        "transport": "effective",
        "rates": list(plumesim.REFERENCE_RATES_KGPH), "winds": list(plumesim.REFERENCE_WINDS_MPS),
        "snapshots_per_run": 10,
    },
    "dataset": {
        "samples": {"train": 8, "val": 2, "test": 2},
        "subsets": ["rate", "seg", "inv"],
        "scale_range": [2.0, 4.0],
        "max_plumes": 3, "max_overlap": datasetgen.DEFAULT_MAX_OVERLAP,
        "noise_sigma": datasetgen.DEFAULT_NOISE_SIGMA,
        "label_ime_min": 300.0, "label_area_min": 300,
        "base_maps": 6, "snr": 600.0,
    },
    "spectral": {"absorption_csv": None, "temperature": 296.0, "pressure": 97000.0, "path_m": 3000.0},
    "inversion": {"k": 4, "shrinkage": inversion.DEFAULT_SHRINKAGE, "per_column": False},
    "segmentation": {
        "strategy": "connected_components", "detect_threshold": 30.0, "smooth_px": 1.0, "morph_radius": 1,
        "ime_min": 300.0, "area_min": 300, "max_iter": 200,
    },
    "estimation": {"k_kg_per_ppb": None, "wind_u10": None},
    "eval": {"match_iou": 0.5},
    "objectives": {"lambda": objectives.DEFAULT_LAMBDA, "mask_c": objectives.DEFAULT_MASK_C,
                   "one_minus_iou": False, "dwa_temperature": 2.0,
                   "rate_normaliser": objectives.RATE_NORMALISER_KGPH},
}

# keys whose default is None and the types they accept
_NULLABLE = {
    "paths.snapshots": (str,), "paths.base_maps": (str,), "spectral.absorption_csv": (str,),
    "estimation.k_kg_per_ppb": (int, float), "estimation.wind_u10": (int, float),
    "sim.snapshots_per_run": (int,),
}


class ConfigKeyError(ConfigurationError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _check_type(key: str, value, default):
    if default is None:
        allowed = _NULLABLE.get(key, (str, int, float))
        if value is not None and (isinstance(value, bool) or not isinstance(value, allowed)):
            raise ConfigKeyError(key, f"expected {' or '.join(t.__name__ for t in allowed)}, got {value!r}")
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
            ok = value.is_integer()
            value = int(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigKeyError(key, f"expected {type(default).__name__}, got {value!r}")
    return value


def merge_config(user: Optional[Dict], defaults: Dict = DEFAULTS, prefix: str = "") -> Dict:
    """Overlay ``user`` on ``defaults``; unknown keys and wrong types raise
    :class:`ConfigKeyError` naming the first offending dotted key."""
    out = copy.deepcopy(defaults)
    if user is None:
        return out
    if not isinstance(user, dict):
        raise ConfigKeyError(prefix.rstrip(".") or "<root>", "expected a mapping")
    for key, value in user.items():
        dotted = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigKeyError(dotted, "unknown key")
        if isinstance(defaults[key], dict) and key != "samples":
            out[key] = merge_config(value, defaults[key], dotted + ".")
        elif key == "samples":
            if not isinstance(value, dict):
                raise ConfigKeyError(dotted, "expected a mapping of split -> count")
            for split, n in value.items():
                if split not in datasetgen.SPLITS:
                    raise ConfigKeyError(f"{dotted}.{split}", "unknown split")
                if isinstance(n, bool) or not isinstance(n, int) or n < 0:
                    raise ConfigKeyError(f"{dotted}.{split}", f"expected a count >= 0, got {n!r}")
            out[key] = {**defaults[key], **value}
        else:
            out[key] = _check_type(dotted, value, defaults[key])
    return out


def load_config(path: Optional[str], seed: Optional[int] = None, threads: Optional[int] = None) -> Dict:
    user = None
    if path is not None:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigKeyError("<file>", f"not valid YAML ({exc})") from None
    cfg = merge_config(user)
    if seed is not None:
        cfg["seed"] = int(seed)
    if threads is not None:
        cfg["threads"] = int(threads)
    if cfg["threads"] < 1:
        raise ConfigKeyError("threads", "must be >= 1")
    return cfg


# ---------------------------------------------------------------------------
# config -> module objects

def sim_config(cfg: Dict) -> plumesim.SweepConfig:
    s = cfg["sim"]
    base = plumesim.SimConfig(height=s["height"], width=s["width"], pixel_size=float(s["pixel_size"]),
                              eddy_diffusivity=float(s["eddy_diffusivity"]),
                              turbulence_intensity=float(s["turbulence_intensity"]),
                              turbulence_timescale=float(s["turbulence_timescale"]),
                              duration=float(s["duration"]), snapshot_interval=float(s["snapshot_interval"]),
                              snapshot_start=float(s["snapshot_start"]), transport=s["transport"])
    _keyed("sim", base.validate)
    if not s["rates"] or not s["winds"]:
        raise ConfigKeyError("sim.rates" if not s["rates"] else "sim.winds", "must not be empty")
    for name in ("rates", "winds"):
        if any(isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0 for v in s[name]):
            raise ConfigKeyError(f"sim.{name}", "values must be numbers >= 0")
    return plumesim.SweepConfig(tuple(float(r) for r in s["rates"]), tuple(float(w) for w in s["winds"]),
                                s["snapshots_per_run"], base)


def _keyed(section: str, fn):
    """Run a validator and prefix its message with the section name."""
    try:
        return fn()
    except ConfigurationError as exc:
        msg = str(exc)
        field = msg.split()[0] if msg else "?"
        raise ConfigKeyError(f"{section}.{field}", msg) from None


def dataset_config(cfg: Dict) -> datasetgen.DatasetConfig:
    d = cfg["dataset"]
    if len(d["scale_range"]) != 2:
        raise ConfigKeyError("dataset.scale_range", "expected [lo, hi]")
    dc = datasetgen.DatasetConfig(samples=dict(d["samples"]), subsets=tuple(d["subsets"]),
                                  scale_range=tuple(float(x) for x in d["scale_range"]),
                                  max_plumes=d["max_plumes"], max_overlap=float(d["max_overlap"]),
                                  noise_sigma=float(d["noise_sigma"]), label_ime_min=float(d["label_ime_min"]),
                                  label_area_min=d["label_area_min"])
    _keyed("dataset", dc.validate)
    if not 0 <= dc.max_overlap <= 1:
        raise ConfigKeyError("dataset.max_overlap", "must lie in [0, 1]")
    if d["base_maps"] < 1:
        raise ConfigKeyError("dataset.base_maps", "must be >= 1")
    if not d["snr"] > 0:
        raise ConfigKeyError("dataset.snr", "must be positive")
    return dc


def seg_config(cfg: Dict) -> plumeops.SegmentationConfig:
    s = cfg["segmentation"]
    sc = plumeops.SegmentationConfig(strategy=s["strategy"], detect_threshold=float(s["detect_threshold"]),
                                     smooth_px=float(s["smooth_px"]), morph_radius=s["morph_radius"], ime_min=float(s["ime_min"]),
                                     area_min=s["area_min"], max_iter=s["max_iter"])
    if sc.strategy not in ("connected_components", "active_contour"):
        raise ConfigKeyError("segmentation.strategy", f"unknown strategy {sc.strategy!r}")
    _keyed("segmentation", sc.validate)
    return sc


def spectral_setup(cfg: Dict, centers=None, fwhm=None) -> datasetgen.SpectralSetup:
    s = cfg["spectral"]
    if s["absorption_csv"] is None:
        table = scenes.default_absorption_table()
    else:
        table = _io.read_absorption_csv(s["absorption_csv"])
    if centers is None:
        centers, fwhm = scenes.enmap_like_bands()
    srf = spectral.build_srf(centers, fwhm, table.wavelengths)
    air = spectral.mean_air_column(float(s["temperature"]), float(s["pressure"]), float(s["path_m"]))
    return datasetgen.SpectralSetup(table, srf, air)


def check_inversion(cfg: Dict):
    inv = cfg["inversion"]
    if inv["k"] < 1:
        raise ConfigKeyError("inversion.k", "must be >= 1")
    if not 0 <= inv["shrinkage"] <= 1:
        raise ConfigKeyError("inversion.shrinkage", "must lie in [0, 1]")


# ---------------------------------------------------------------------------
# artifacts

def write_run_record(directory: Path, command: str, cfg: Dict) -> None:
    # the thread count is an execution detail and is left out so outputs
    # stay byte-identical for any pool size
    resolved = {k: v for k, v in cfg.items() if k != "threads"}
    _io.write_json(Path(directory) / "run.json", {"command": command, "config": resolved,
                                                  "tool_version": _io.tool_version()})


def synthetic_bases(cfg: Dict, count: int, shape) -> List:
    s = cfg["dataset"]
    return [scenes.synthetic_base_cube(shape[0], shape[1], rng_for(cfg["seed"], "basemap", i), snr=float(s["snr"]))
            for i in range(count)]


def base_maps(cfg: Dict, shape) -> List:
    path = cfg["paths"]["base_maps"]
    if path is None:
        return synthetic_bases(cfg, cfg["dataset"]["base_maps"], shape)
    stems = _io.list_stems(path)
    if not stems:
        raise FormatError(f"{path}: no base maps found")
    return [_io.read_cube(s) for s in stems]


def _map_stems(directory, cubes: bool) -> List[Path]:
    """Raster stems under ``directory`` (recursive) that are cubes or 2-D maps."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    out = []
    for raw in sorted(directory.rglob("*.f32")):
        stem = _io.stem_of(raw)
        side = _io.with_ext(stem, ".json")
        if not side.exists():
            continue
        is_cube = "bands" in _io.read_json(side)
        if is_cube == cubes:
            out.append(stem)
    return out


def _rel(stem: Path, root: Path) -> Path:
    try:
        return stem.relative_to(root)
    except ValueError:
        return Path(stem.name)


def _pool_map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _stage(module: str, sample: str, fn):
    try:
        return fn()
    except PlumeError as exc:
        raise PlumeError(f"{module}: sample {sample}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(cfg: Dict, out: Path, args) -> None:
    sweep = sim_config(cfg)
    snaps = plumesim.sweep(sweep, cfg["seed"], cfg["threads"])
    directory = _io.ensure_dir(out / "snapshots")
    plumesim.write_snapshots(directory, snaps)
    write_run_record(out, "simulate", cfg)
    write_run_record(directory, "simulate", cfg)


def _snapshots(cfg: Dict, args) -> List:
    path = getattr(args, "snapshots", None) or cfg["paths"]["snapshots"]
    if path is not None:
        snaps = plumesim.ingest_snapshots(path)
        if not snaps:
            raise FormatError(f"{path}: no snapshots found")
        return snaps
    return plumesim.sweep(sim_config(cfg), cfg["seed"], cfg["threads"])


def cmd_dataset(cfg: Dict, out: Path, args) -> None:
    dc = dataset_config(cfg)
    snaps = _snapshots(cfg, args)
    shape = snaps[0].map.shape
    bases = base_maps(cfg, shape) if "inv" in dc.subsets else []
    setup = spectral_setup(cfg, *(_band_meta(bases))) if "inv" in dc.subsets else None
    gen = datasetgen.DatasetGenerator(snaps, bases, setup, dc, cfg["seed"])
    datasetgen.generate_dataset(gen, out, cfg["threads"])
    write_run_record(out, "dataset", cfg)


def _band_meta(bases):
    if not bases:
        return None, None
    return bases[0].band_centers, bases[0].band_fwhm


def cmd_inject(cfg: Dict, out: Path, args) -> None:
    stems = _map_stems(args.maps, cubes=False)
    root = Path(args.maps)
    out = _io.ensure_dir(out)
    pool: Dict = {}

    def run(item):
        i, stem = item
        cmap, meta = _io.read_map(stem)
        if cfg["paths"]["base_maps"] is not None:
            if "bases" not in pool:
                pool["bases"] = base_maps(cfg, cmap.shape)
            bases = pool["bases"]
            base = bases[int(rng_for(cfg["seed"], "inject", i).integers(len(bases)))]
        else:
            base = scenes.synthetic_base_cube(cmap.height, cmap.width, rng_for(cfg["seed"], "inject", i),
                                              snr=float(cfg["dataset"]["snr"]))
        setup = spectral_setup(cfg, base.band_centers, base.band_fwhm)
        cube = base
        if cmap.values.any():
            t = spectral.transmittance_cube(cmap, setup.table, setup.srf, setup.air_column, by_column=True)
            cube = spectral.inject(base, t)
        target = out / _rel(stem, root)
        _io.write_cube(target, cube)
        write_run_record(target.parent, "inject", cfg)

    if cfg["paths"]["base_maps"] is not None and stems:
        pool["bases"] = base_maps(cfg, _io.read_map(stems[0])[0].shape)
    for item in enumerate(stems):
        _stage("spectral", item[1].name, lambda: run(item))
    write_run_record(out, "inject", cfg)


def cmd_invert(cfg: Dict, out: Path, args) -> None:
    check_inversion(cfg)
    inv = cfg["inversion"]
    root = Path(args.cubes)
    stems = _map_stems(root, cubes=True)
    out = _io.ensure_dir(out)

    def run(stem):
        def work():
            cube = _io.read_cube(stem)
            setup = spectral_setup(cfg, cube.band_centers, cube.band_fwhm)
            d = spectral.unit_depth(setup.table, setup.srf, setup.air_column)
            res = inversion.invert(cube, d, k=inv["k"], shrinkage=float(inv["shrinkage"]),
                                   seed=derive_seed(cfg["seed"], "kmeans"), per_column=inv["per_column"],
                                   pixel_size=float(cfg["sim"]["pixel_size"]))
            target = out / _rel(stem, root)
            diag = dict(res.diagnostics)
            label = stem.parent / f"{stem.name}_label"
            if _io.with_ext(label, ".f32").exists():
                lab, _ = _io.read_map(label)
                if lab.values.any():
                    diag["label_pearson"] = evaluation.pearson(res.map.values.ravel(), lab.values.ravel())
                diag["label_rmse_ppm"] = evaluation.rmse(lab.values / 1000.0, res.map.values / 1000.0)
            _io.write_map(target, res.map)
            _io.write_json(target.parent / f"{target.name}_diag.json", _jsonable(diag))
            return target.parent
        return _stage("inversion", stem.name, work)

    for d in sorted(set(_pool_map(run, stems, cfg["threads"]))):
        write_run_record(d, "invert", cfg)
    write_run_record(out, "invert", cfg)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _segment_record(inst: PlumeInstance, cmap: ConcentrationMap, k: float) -> Dict:
    rec = plumeops.instance_record(inst, cmap, k=k)
    rec["score"] = inst.score
    rec["pixel_sum"] = inst.pixel_sum
    return rec


def cmd_segment(cfg: Dict, out: Path, args) -> None:
    sc = seg_config(cfg)
    root = Path(args.maps)
    stems = [s for s in _map_stems(root, cubes=False) if not s.name.endswith("_label")]
    out = _io.ensure_dir(out)
    k_cfg = cfg["estimation"]["k_kg_per_ppb"]

    def run(stem):
        def work():
            cmap, _ = _io.read_map(stem)
            k = ime_scale_for_pixel(cmap.pixel_size) if k_cfg is None else float(k_cfg)
            found = plumeops.filter_instances(plumeops.segment_plumes(cmap, sc, k), sc)
            target = out / _rel(stem, root)
            target.parent.mkdir(parents=True, exist_ok=True)
            _io.write_json(_io.with_ext(target, ".json"),
                           {"sample": stem.name, "instances": [_segment_record(i, cmap, k) for i in found]})
            return target.parent
        return _stage("plumeops", stem.name, work)

    for d in sorted(set(_pool_map(run, stems, cfg["threads"]))):
        write_run_record(d, "segment", cfg)
    write_run_record(out, "segment", cfg)


def _instance_files(directory) -> List[Path]:
    return sorted(p for p in Path(directory).rglob("*.json")
                  if p.name not in ("run.json", "labels.json", "manifest.json") and not p.name.endswith("_diag.json"))


def _label_index(path) -> Dict[str, List[Dict]]:
    """Sample id -> label records from every ``labels.json`` under ``path``
    (or from ``path`` itself when it is a file)."""
    path = Path(path)
    files = [path] if path.is_file() else sorted(path.rglob("labels.json"))
    index: Dict[str, List[Dict]] = {}
    for f in files:
        index.update(_io.read_json(f))
    return index


def _prediction_index(path) -> Dict[str, List[Dict]]:
    path = Path(path)
    if path.is_file():
        return _io.read_json(path)
    index = {}
    for f in _instance_files(path):
        doc = _io.read_json(f)
        if isinstance(doc, dict) and "instances" in doc:
            index[doc.get("sample", f.stem)] = doc["instances"]
    return index


def cmd_estimate(cfg: Dict, out: Path, args) -> None:
    """Attach IME rates to segmented instances.  The wind is the labelled plume's
    wind (best mask IoU) when labels are given, else the map's ``wind_u10_mps``
    sidecar field, else ``estimation.wind_u10``."""
    root = Path(args.instances)
    maps_root = Path(args.maps)
    labels = _label_index(args.labels) if args.labels else {}
    k_cfg = cfg["estimation"]["k_kg_per_ppb"]
    out = _io.ensure_dir(out)
    dirs = set()
    for f in _instance_files(root):
        doc = _io.read_json(f)
        if not isinstance(doc, dict) or "instances" not in doc:
            continue
        sample = doc.get("sample", f.stem)
        rel = _rel(_io.stem_of(f), root)

        def work():
            cmap, meta = _io.read_map(maps_root / rel)
            k = ime_scale_for_pixel(cmap.pixel_size) if k_cfg is None else float(k_cfg)
            truths = datasetgen.instances_from_records(labels.get(sample, []))
            truth_winds = [rec.get("wind_u10_mps") for rec in labels.get(sample, [])]
            recs = []
            for rec in doc["instances"]:
                inst = datasetgen.instances_from_records([rec])[0]
                u = _wind_for(inst, truths, truth_winds, meta, cfg)
                rec = dict(rec)
                rec["wind_u10_mps"] = u
                rec["rate_kgph"] = None if u is None else plumeops.emission_rate(inst, cmap, u, k)
                recs.append(rec)
            target = out / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            _io.write_json(_io.with_ext(target, ".json"), {"sample": sample, "instances": recs})
            return target.parent

        dirs.add(_stage("plumeops", sample, work))
    for d in sorted(dirs):
        write_run_record(d, "estimate", cfg)
    write_run_record(out, "estimate", cfg)


def _wind_for(inst, truths, truth_winds, meta, cfg):
    if truths:
        ious = [mask_iou(inst.mask, t.mask) for t in truths]
        j = int(np.argmax(ious))
        if ious[j] > 0 and truth_winds[j] is not None:
            return float(truth_winds[j])
    if "wind_u10_mps" in meta:
        return float(meta["wind_u10_mps"])
    return cfg["estimation"]["wind_u10"]


def _match_tables(pred: Dict[str, List[Dict]], truth: Dict[str, List[Dict]]):
    tables = []
    for sample in sorted(set(pred) | set(truth)):
        p = datasetgen.instances_from_records(pred.get(sample, []))
        t = datasetgen.instances_from_records(truth.get(sample, []))
        scores = [1.0 if i.score is None else i.score for i in p]
        tables.append(evaluation.MatchTable.from_instances([i.mask for i in p], scores, [i.mask for i in t]))
    return tables


def _rate_pairs(pred, truth, iou, values: Optional[Dict] = None):
    pairs = []
    for sample in sorted(set(pred) | set(truth)):
        p = datasetgen.instances_from_records(pred.get(sample, []))
        t = datasetgen.instances_from_records(truth.get(sample, []))
        pairs.extend(objectives.match_detections(p, t, iou))
    return pairs


def cmd_eval(cfg: Dict, out: Path, args) -> None:
    """Segmentation AP and rate errors from instance files, and RMSE/MAE (ppm)
    of predicted maps against ``<id>_label`` maps when ``--maps`` is given."""
    report: Dict = {}
    truth = _label_index(args.truth)
    if args.pred:
        pred = _prediction_index(args.pred)
        report["segmentation"] = evaluation.segmentation_report(args.method, _match_tables(pred, truth))
        pairs = [p for p in _rate_pairs(pred, truth, cfg["eval"]["match_iou"]) if p.kind == "TP"
                 and p.predicted_rate is not None]
        if pairs:
            y = [p.true_rate for p in pairs]
            yh = [p.predicted_rate for p in pairs]
            report["rates"] = {"method": args.method, "rmse_kgph": evaluation.rmse(y, yh),
                               "mae_kgph": evaluation.mae(y, yh), "pearson": _safe_pearson(y, yh), "count": len(y)}
    if args.maps:
        ys, yh = [], []
        for stem in _map_stems(args.maps, cubes=False):
            if stem.name.endswith("_label"):
                continue
            label = _find_label(Path(args.truth), stem.name)
            if label is None:
                continue
            ys.append(_io.read_map(label)[0].values.ravel())
            yh.append(_io.read_map(stem)[0].values.ravel())
        if ys:
            report["inversion"] = evaluation.regression_report(args.method, np.concatenate(ys), np.concatenate(yh))
    out = _io.ensure_dir(out)
    _io.write_json(out / "metrics.json", _jsonable(report))
    write_run_record(out, "eval", cfg)


def _safe_pearson(x, y):
    try:
        return evaluation.pearson(x, y)
    except PlumeError:
        return None


def _find_label(root: Path, name: str) -> Optional[Path]:
    hits = sorted(root.rglob(f"{name}_label.f32"))
    return _io.stem_of(hits[0]) if hits else None


def cmd_losses(cfg: Dict, out: Path, args) -> None:
    """Loss report from predicted instances against labels (plus DWA weights
    from an optional ``{task: [epoch losses]}`` history file)."""
    o = cfg["objectives"]
    pred = _prediction_index(args.pred)
    truth = _label_index(args.truth)
    pairs = _rate_pairs(pred, truth, cfg["eval"]["match_iou"])
    seg = cfg["segmentation"]
    er = objectives.er_loss(pairs, float(seg["ime_min"]), float(o["rate_normaliser"]))
    tp = [p for p in pairs if p.kind == "TP"]
    mask_terms = [objectives.mask_loss(p.truth.mask, p.predicted.mask, float(o["mask_c"]), o["one_minus_iou"])
                  for p in tp]
    box = objectives.box_loss([_cxcywh(p.predicted.bbox) for p in tp], [_cxcywh(p.truth.bbox) for p in tp]) \
        if tp else 0.0
    # classification: matched detections are plume, unmatched ones background
    det = [p for p in pairs if p.kind != "FN"]
    if det:
        y = [[1.0, 0.0] if p.kind == "TP" else [0.0, 1.0] for p in det]
        cls = objectives.cross_entropy(y, [[1.0, 0.0]] * len(det))
    else:
        cls = 0.0
    mask = float(np.mean(mask_terms)) if mask_terms else 0.0
    mrcnn = objectives.maskrcnn_loss(cls, box, mask)
    losses = {"cls": cls, "box": box, "mask": mask, "maskrcnn": mrcnn, "er": er,
              "mtl01": objectives.mtl01_loss(mrcnn, er, float(o["lambda"])),
              "tp": len(tp), "fp": sum(p.kind == "FP" for p in pairs), "fn": sum(p.kind == "FN" for p in pairs)}
    weights = None
    if args.history:
        hist = objectives.LossHistory({k: list(map(float, v)) for k, v in _io.read_json(args.history).items()})
        weights = objectives.dwa_weights(hist, float(o["dwa_temperature"]))
        if hist.tasks == ["unet", "maskrcnn"]:
            losses["mtl02"] = objectives.mtl02_loss(hist.losses["unet"][-1], mrcnn, weights[0], weights[1])
    out = _io.ensure_dir(out)
    _io.write_json(out / "losses.json", _jsonable(objectives.loss_report(losses, weights, o)))
    write_run_record(out, "losses", cfg)


def _cxcywh(box):
    r0, c0, r1, c1 = box
    return ((c0 + c1) / 2.0, (r0 + r1) / 2.0, c1 - c0 + 1.0, r1 - r0 + 1.0)


def cmd_pipeline(cfg: Dict, out: Path, args) -> None:
    """simulate -> dataset -> invert -> segment -> estimate -> eval, one seed."""
    ns = argparse.Namespace
    cmd_simulate(cfg, out / "simulate", ns())
    cmd_dataset(cfg, out / "dataset", ns(snapshots=str(out / "simulate" / "snapshots")))
    inv_root = out / "dataset" / "inv"
    cmd_invert(cfg, out / "invert", ns(cubes=str(inv_root)))
    cmd_segment(cfg, out / "segment", ns(maps=str(out / "invert")))
    cmd_estimate(cfg, out / "estimate", ns(instances=str(out / "segment"), maps=str(out / "invert"),
                                           labels=str(inv_root)))
    cmd_eval(cfg, out / "eval", ns(pred=str(out / "estimate"), truth=str(inv_root), maps=str(out / "invert"),
                                   method="matched filter + connected components"))
    write_run_record(out, "pipeline", cfg)


COMMANDS = {
    "simulate": cmd_simulate, "dataset": cmd_dataset, "inject": cmd_inject, "invert": cmd_invert,
    "segment": cmd_segment, "estimate": cmd_estimate, "losses": cmd_losses, "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--threads", type=int, help="worker threads; results do not depend on it")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="ch4plume", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run the plume surrogate over the rate x wind grid")
    p = sub.add_parser("dataset", parents=[common], help="build the rate/seg/inv dataset")
    p.add_argument("--snapshots", help="snapshot directory (default: simulate in memory)")
    p = sub.add_parser("inject", parents=[common], help="inject concentration maps into base cubes")
    p.add_argument("--maps", required=True)
    p = sub.add_parser("invert", parents=[common], help="matched-filter retrieval of every cube")
    p.add_argument("--cubes", required=True)
    p = sub.add_parser("segment", parents=[common], help="segment plume instances in concentration maps")
    p.add_argument("--maps", required=True)
    p = sub.add_parser("estimate", parents=[common], help="IME emission rates of segmented instances")
    p.add_argument("--instances", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--labels", help="labels.json file or dataset directory supplying per-plume winds")
    p = sub.add_parser("losses", parents=[common], help="loss report from predictions and labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--history", help="JSON {task: [epoch losses]} for DWA weights")
    p = sub.add_parser("eval", parents=[common], help="metrics report")
    p.add_argument("--truth", required=True, help="labels.json file or dataset directory")
    p.add_argument("--pred", help="instance predictions (directory or labels-style file)")
    p.add_argument("--maps", help="predicted concentration maps, compared with <id>_label maps")
    p.add_argument("--method", default="prediction")
    sub.add_parser("pipeline", parents=[common], help="simulate through eval with one seed")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.threads)
        out = _io.ensure_dir(args.out)
        COMMANDS[args.command](cfg, out, args)
    except ConfigurationError as exc:
        key = getattr(exc, "key", None)
        print(f"configuration error{f' at {key}' if key else ''}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PlumeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
