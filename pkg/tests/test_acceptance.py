"""Acceptance suite.  Each test records one line in the terminal summary; a
criterion split over several tests passes only if all of them pass."""
import math
import time
from itertools import combinations

import numpy as np
import pytest
from scipy import ndimage

import oracles
from ch4plume import (core, datasetgen, evaluation, inversion, objectives,
                      plumeops, plumesim, scenes, spectral)
from ch4plume.core import ConcentrationMap, PlumeInstance

pytestmark = pytest.mark.slow

RUNTIME_LIMIT_S = 300.0


def _generator(snapshots, kit, n_bases=0, master_seed=0):
    bases = [scenes.synthetic_base_cube(256, 256, np.random.default_rng(100 + i)) for i in range(n_bases)]
    setup = datasetgen.SpectralSetup(kit["table"], kit["srf"], spectral.AIR_COLUMN) if n_bases else None
    return datasetgen.DatasetGenerator(snapshots, bases, setup, master_seed=master_seed)


# 1 -------------------------------------------------------------------------

def test_c1_ime_rate_linearity(sweep_snapshots, criterion):
    snaps, seconds = sweep_snapshots
    assert len(snaps) == 4 * 4 * 20
    _, _, r2 = plumesim.linearity_check(snaps)
    ok = r2 >= 0.8 and seconds < RUNTIME_LIMIT_S
    criterion(1, ok, f"R^2 = {r2:.3f} (need >= 0.8), sweep {seconds:.0f} s")
    assert seconds < RUNTIME_LIMIT_S
    assert r2 >= 0.8


# 2 -------------------------------------------------------------------------

def test_c2_injection_retrieval(sweep_snapshots, kit, criterion):
    snaps, _ = sweep_snapshots
    t0 = time.perf_counter()
    gen = _generator(snaps, kit, n_bases=6)
    rs, zero_means = [], []
    for i in range(20):
        cube, label, _, base_index, _ = gen.inv_sample("train", i)
        out = inversion.invert(cube, kit["unit_depth"], k=4, seed=0)
        if label.values.any():
            rs.append(evaluation.pearson(out.map.values, label.values))
        else:
            zero_means.append(float(out.map.values.mean()))
    # every base map with no plume at all, so the zero case is always exercised
    for base in gen.base_maps:
        zero_means.append(float(inversion.invert(base, kit["unit_depth"], k=4, seed=0).map.values.mean()))
    seconds = time.perf_counter() - t0
    median_r = float(np.median(rs))
    worst_zero = max(abs(z) for z in zero_means)
    sigma = datasetgen.DEFAULT_NOISE_SIGMA
    ok = median_r >= 0.7 and worst_zero < sigma and seconds < RUNTIME_LIMIT_S
    criterion(2, ok, f"median r = {median_r:.3f} over {len(rs)} plume samples (need >= 0.7), "
                     f"max |mean alpha| on {len(zero_means)} plume-free cubes = {worst_zero:.1f} ppb "
                     f"(need < {sigma:.0f}), {seconds:.0f} s")
    assert median_r >= 0.7
    assert worst_zero < sigma
    assert seconds < RUNTIME_LIMIT_S


# 3 -------------------------------------------------------------------------

def test_c3_matched_filter_exactness(criterion):
    rng = np.random.default_rng(3)
    worst_additive = 0.0
    for _ in range(50):
        b = int(rng.integers(3, 12))
        n = int(rng.integers(b + 5, 200))
        x = rng.uniform(0.5, 2.0, (n, b)) * rng.uniform(1, 100, b)
        stats = inversion.background_stats(x, shrinkage=float(rng.uniform(0, 0.5)))
        t = inversion.target_signature(stats, rng.uniform(1e-6, 1e-4, b))
        a = float(rng.uniform(-500, 500))
        got = inversion.filter_scores((stats.mean + a * t)[None, :], stats, t)[0]
        worst_additive = max(worst_additive, abs(got - a) / abs(a))
    worst_dense = 0.0
    for _ in range(20):
        radiance = rng.uniform(1.0, 3.0, (4, 4, 5))
        d = rng.uniform(1e-5, 1e-4, 5)
        shrink = float(rng.uniform(0, 0.3))
        cube = core.HyperCube(radiance, np.arange(5.0) + 2000, np.full(5, 8.0))
        got = inversion.matched_filter(cube, np.ones((4, 4), bool), d, shrink).raw
        want = oracles.dense_matched_filter(radiance, d, shrink)
        worst_dense = max(worst_dense, float(np.max(np.abs(got - want)) / np.max(np.abs(want))))
    ok = worst_additive <= 1e-9 and worst_dense <= 1e-9
    criterion(3, ok, f"additive recovery rel err {worst_additive:.1e}, dense oracle rel err {worst_dense:.1e} "
                     f"(need <= 1e-9)")
    assert worst_additive <= 1e-9
    assert worst_dense <= 1e-9


# 4 -------------------------------------------------------------------------

def test_c4_mass_budget(criterion):
    duration = 9000.0
    worst = 0.0
    for rate in plumesim.REFERENCE_RATES_KGPH:
        cfg = plumesim.SimConfig(emission_rate=rate, wind_speed_u10=5.0, duration=duration, seed=4)
        model = plumesim.PlumeModel(cfg)
        outflow = 0.0
        steps = int(round(duration / model.dt))
        for _ in range(steps):
            vel = model.next_velocity()
            outflow += oracles.boundary_outflow(model.mass, vel, model.dt, model.dx)
            model.step(vel)
        injected = rate / 3600.0 * steps * model.dt
        rel = abs(model.mass.sum() - (injected - outflow)) / injected
        worst = max(worst, rel)
    criterion(4, worst <= 0.01, f"worst relative budget error {worst:.1e} over 4 rates, 2.5 h (need <= 1e-2)")
    assert worst <= 0.01


# 5 -------------------------------------------------------------------------

def _loss_examples():
    sq = np.zeros((20, 20), bool)
    sq[2:6, 2:6] = True
    far = np.zeros((20, 20), bool)
    far[12:16, 2:6] = True          # centroid 10 rows away
    fp = objectives.DetectionPair("FP", predicted_rate=50.0)
    low = objectives.DetectionPair("FP", predicted_rate=50.0, predicted_pixel_sum=299.0)
    tp = objectives.DetectionPair("TP", predicted_rate=700.0, true_rate=700.0)
    hist = objectives.LossHistory({"a": [1.0, math.log(2) + 1], "b": [1.0, 1.0]})
    return [
        ("mse", objectives.mse([0, 0], [1, 3]), oracles.MSE_0_0_VS_1_3),
        ("mse zero", objectives.mse([1, 2], [1, 2]), 0.0),
        ("smooth 0.5", float(objectives.smooth_l1_elementwise(0.5)), oracles.SMOOTH_L1_HALF),
        ("smooth 3", float(objectives.smooth_l1_elementwise(3.0)), oracles.SMOOTH_L1_THREE),
        ("ce uniform", objectives.cross_entropy([[1, 0, 0, 0]], [[0.25] * 4]), oracles.CE_UNIFORM_4),
        ("ce perfect", objectives.cross_entropy([[0, 1]], [[0, 1]]), 0.0),
        ("box", objectives.box_loss([[10.5, 5, 4, 4]], [[10, 5, 4, 4]]), oracles.BOX_OFFSET_HALF),
        ("box zero", objectives.box_loss([[1, 2, 3, 4]], [[1, 2, 3, 4]]), 0.0),
        ("mask same", objectives.mask_loss(sq, sq), oracles.MASK_IDENTICAL),
        ("mask far", objectives.mask_loss(sq, far), oracles.MASK_DISJOINT_RHO_10),
        ("maskrcnn 0", objectives.maskrcnn_loss(0, 0, 0), 0.0),
        ("maskrcnn 6", objectives.maskrcnn_loss(1, 2, 3), 6.0),
        ("er fp", objectives.er_loss([fp]), oracles.ER_SINGLE_FP_50),
        ("er tp", objectives.er_loss([tp]), 0.0),
        ("er excluded", objectives.er_loss([tp, low]), 0.0),
        ("mtl01", objectives.mtl01_loss(2.0, 5.0, 0.1), oracles.MTL01_2_5_01),
        ("mtl01 lam 0", objectives.mtl01_loss(2.0, 5.0, 0.0), 2.0),
        ("mtl02", objectives.mtl02_loss(2.0, 4.0, 0.5, 0.5), oracles.MTL02_HALF_2_4),
        ("mtl02 unet", objectives.mtl02_loss(2.0, 4.0, 1.0, 0.0), 2.0),
        ("dwa 1", float(objectives.dwa_weights(hist, 1.0)[0]), oracles.DWA_LN2[0]),
        ("dwa 2", float(objectives.dwa_weights(hist, 1.0)[1]), oracles.DWA_LN2[1]),
    ]


def test_c5_loss_algebra(criterion):
    bad = [(name, got, want) for name, got, want in _loss_examples() if abs(got - want) > 1e-9]
    rng = np.random.default_rng(5)
    worst_sum = worst_equal = 0.0
    for _ in range(200):
        k = int(rng.integers(1, 6))
        # decaying loss trajectories: epoch-to-epoch ratio within [0.5, 1.5]
        hist = objectives.LossHistory({f"t{j}": list(rng.uniform(0.01, 10) * np.cumprod(rng.uniform(0.5, 1.5, 4)))
                                       for j in range(k)})
        w = objectives.dwa_weights(hist, float(rng.uniform(0.1, 10)))
        worst_sum = max(worst_sum, abs(w.sum() - k))
        w_hot = objectives.dwa_weights(hist, 1e6)
        worst_equal = max(worst_equal, float(np.max(np.abs(w_hot - 1.0))))
    ok = not bad and worst_sum <= 1e-9 and worst_equal <= 1e-6
    criterion(5, ok, f"{len(_loss_examples()) - len(bad)}/{len(_loss_examples())} hand examples exact, "
                     f"dwa sum err {worst_sum:.1e}, T=1e6 equal-weight err {worst_equal:.1e}")
    assert not bad
    assert worst_sum <= 1e-9
    assert worst_equal <= 1e-6


# 6 -------------------------------------------------------------------------

def test_c6_dataset_constraints(sweep_snapshots, tmp_path, criterion):
    snaps, _ = sweep_snapshots
    gen = _generator(snaps, None)
    k = core.IME_SCALE_KG_PER_PPB
    worst_overlap, min_ime, n_checked = 0.0, math.inf, 0
    for i in range(100):
        split = datasetgen.SPLITS[i % 3]
        _, instances, _, layers = gen.multi_plume(split, i, return_layers=True)
        n_checked += 1
        for a, b in combinations(layers, 2):
            worst_overlap = max(worst_overlap, datasetgen.overlap_ratio(a, b))
        for inst in instances:
            min_ime = min(min_ime, k * inst.pixel_sum)

    cfg = datasetgen.DatasetConfig(samples={"train": 4, "val": 2, "test": 2}, subsets=("seg",))
    trees = []
    for run in range(2):
        g = datasetgen.DatasetGenerator(snaps, [], None, cfg, master_seed=0)
        out = tmp_path / f"run{run}"
        datasetgen.generate_dataset(g, out, threads=1 + run)
        trees.append({p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    identical = trees[0] == trees[1]
    ok = worst_overlap <= 0.15 and min_ime >= 300 and identical
    criterion(6, ok, f"{n_checked} samples: max pairwise overlap {worst_overlap:.3f} (<= 0.15), "
                     f"min label IME {min_ime:.0f} kg (>= 300), regeneration byte-identical: {identical}")
    assert worst_overlap <= 0.15
    assert min_ime >= 300
    assert identical


# 7 -------------------------------------------------------------------------

def _random_images(rng):
    images = []
    for _ in range(int(rng.integers(1, 4))):
        n_det = int(rng.integers(0, 6))
        n_true = int(rng.integers(0, 4))
        ious = rng.uniform(0, 1, (n_det, n_true))
        ious[rng.uniform(size=ious.shape) < 0.4] = 0.0
        images.append((rng.uniform(0, 1, n_det), ious))
    if sum(t.shape[1] for _, t in images) == 0:
        images[0] = (images[0][0], rng.uniform(0, 1, (images[0][0].size, 1)))
    return images


def test_c7_metric_oracles(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        images = _random_images(rng)
        tables = [evaluation.MatchTable(s, i) for s, i in images]
        suite = evaluation.ap_suite(tables)
        per = {t: oracles.brute_force_ap(images, t) for t in evaluation.AP_THRESHOLDS}
        want = {"AP50": per[0.5], "AP75": per[0.75], "AP95": per[0.95],
                "AP50:95": float(np.mean(list(per.values())))}
        worst = max(worst, max(abs(suite[key] - want[key]) for key in want))
    rmse_ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        y, yhat = rng.normal(size=n) * 10, rng.normal(size=n) * 10
        rmse_ok &= evaluation.rmse(y, yhat) >= evaluation.mae(y, yhat) - 1e-12
    ok = worst <= 1e-12 and rmse_ok
    criterion(7, ok, f"ap_suite vs brute force max err {worst:.1e} on 50 instances, rmse >= mae on 1000 vectors: "
                     f"{rmse_ok}")
    assert worst <= 1e-12
    assert rmse_ok


# 8 -------------------------------------------------------------------------

def _connected_plume(gen, rng):
    while True:
        cmap, _, _ = gen.draw_plume("train", rng)
        _, n = ndimage.label(cmap.values > 0, structure=np.ones((3, 3), bool))
        if n == 1:
            return cmap


def _two_disjoint(gen, rng, margin=5):
    """Two connected plumes whose supports stay ``margin`` pixels apart."""
    while True:
        plumes = [_connected_plume(gen, rng) for _ in range(2)]
        try:
            cmap, inst = datasetgen.composite(plumes, gen.canvas, 0.0, rng)
        except datasetgen.PlacementExhaustedError:
            continue
        a, b = (ndimage.binary_dilation(x.mask, iterations=margin) for x in inst)
        if not (a & b).any():
            return cmap, inst


def _ap50(maps_and_truths, config):
    tables = []
    for cmap, truths in maps_and_truths:
        det = plumeops.filter_instances(plumeops.segment_plumes(cmap, config))
        tables.append(evaluation.MatchTable.from_instances([d.mask for d in det], [d.score for d in det],
                                                          [t.mask for t in truths]))
    return evaluation.ap_suite(tables)["AP50"]


def test_c8_segmentation_sanity(sweep_snapshots, criterion):
    snaps, _ = sweep_snapshots
    gen = _generator(snaps, None)
    samples = [_two_disjoint(gen, np.random.default_rng(800 + i)) for i in range(50)]
    sigma = datasetgen.DEFAULT_NOISE_SIGMA
    clean = _ap50(samples, plumeops.SegmentationConfig.for_noise(0.0))
    noisy = _ap50([(datasetgen.add_noise(c, sigma, 900 + i), t) for i, (c, t) in enumerate(samples)],
                  plumeops.SegmentationConfig())
    ok = clean == 1.0 and noisy >= 0.9
    criterion(8, ok, f"noiseless AP50 = {clean:.3f} (need 1.0), sigma=35 AP50 = {noisy:.3f} over 50 (need >= 0.9)")
    assert clean == 1.0
    assert noisy >= 0.9


# 9 -------------------------------------------------------------------------

def test_c9_emission_rate_chain(sweep_snapshots, criterion):
    # hand example: 10 000 pixels at 30 m (L = 3000 m) holding 500 kg
    k = core.IME_SCALE_KG_PER_PPB
    values = np.zeros((120, 120))
    values[:100, :100] = 500.0 / k / 10000
    cmap = ConcentrationMap(values)
    inst = PlumeInstance(values > 0)
    hand = plumeops.emission_rate(inst, cmap, 2.0)
    hand_ok = math.isclose(hand, oracles.RATE_HAND_KGPH, rel_tol=1e-12)

    snaps, _ = sweep_snapshots
    spec = datasetgen.AugmentSpec(scale=1.0, zero_threshold=0.075, rotation=0.0)
    est, truth = [], []
    for s in snaps:
        label, rate = datasetgen.augment_single(s, spec)
        est.append(plumeops.emission_rate(label.values > 0, label, s.wind_speed_u10))
        truth.append(rate)
    r = evaluation.pearson(truth, est)
    ok = hand_ok and r >= 0.8
    criterion(9, ok, f"hand example {hand:.6f} kg/h (want 672), estimator vs truth r = {r:.3f} over "
                     f"{len(snaps)} snapshots (need >= 0.8)")
    assert hand_ok
    assert r >= 0.8
