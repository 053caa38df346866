import numpy as np
import pytest

import oracles
from ch4plume import spectral
from ch4plume.core import AbsorptionTable, ConcentrationMap, HyperCube, InvalidInputError, ShapeMismatchError


def _table(n=200, seed=0):
    rng = np.random.default_rng(seed)
    wl = np.linspace(2200.0, 2400.0, n)
    return AbsorptionTable(wl, rng.uniform(0, 5e-21, n))


def test_air_column_value():
    assert spectral.mean_air_column() == pytest.approx(oracles.AIR_COLUMN_296K_97KPA_3KM, rel=1e-4)


def test_srf_weights_normalised_and_sigma():
    table = _table()
    srf = spectral.build_srf([2250.0, 2300.0], [8.0, 10.0], table.wavelengths)
    np.testing.assert_allclose(srf.weights.sum(axis=1), 1.0, atol=1e-9)
    assert 8.0 * spectral.FWHM_TO_SIGMA == pytest.approx(oracles.SIGMA_FOR_FWHM_8, abs=1e-4)
    one = spectral.build_srf([5.0], [1.0], [5.0])
    assert np.array_equal(one.weights, [[1.0]])
    with pytest.raises(spectral.CoverageError):
        spectral.build_srf([3000.0], [8.0], table.wavelengths)


def test_optical_depth_examples():
    table = AbsorptionTable(np.array([2300.0, 2301.0]), np.array([1e-20, 1e-20]))
    tau = spectral.optical_depth(1000.0, table, air_column=5e24)
    np.testing.assert_allclose(tau, oracles.TAU_SINGLE_LINE, rtol=1e-12)
    assert not spectral.optical_depth(0.0, table).any()
    with pytest.raises(InvalidInputError):
        spectral.optical_depth(-1.0, table)


def test_transmittance_examples():
    assert spectral.transmittance(0.0) == 1.0
    assert spectral.transmittance(np.log(2.0)) == pytest.approx(0.5, rel=1e-15)
    tau = np.random.default_rng(0).uniform(0, 3, 50)
    want = np.array([np.exp(-t) for t in tau])
    np.testing.assert_allclose(spectral.transmittance(tau), want, rtol=1e-12)
    with pytest.raises(InvalidInputError):
        spectral.transmittance(-0.1)


def test_band_convolve_examples():
    table = _table()
    rng = np.random.default_rng(1)
    srf = spectral.build_srf(rng.uniform(2230, 2370, 6).round(), rng.uniform(5, 15, 6), table.wavelengths)
    const = np.full(table.wavelengths.size, 0.7)
    np.testing.assert_allclose(spectral.band_convolve(const, srf), 0.7, rtol=1e-12)
    t = rng.uniform(0, 1, table.wavelengths.size)
    np.testing.assert_allclose(spectral.band_convolve(t, srf), oracles.loop_band_convolve(t, srf.weights),
                               rtol=1e-12)
    mono = np.linspace(1.0, 0.2, table.wavelengths.size)
    bands = spectral.band_convolve(mono, srf)
    assert np.all(bands <= 1.0) and np.all(bands >= 0.2)
    with pytest.raises(ShapeMismatchError):
        spectral.band_convolve(t[:-1], srf)


def test_inject_examples():
    rng = np.random.default_rng(2)
    base = HyperCube(rng.uniform(1, 2, (3, 3, 4)), np.arange(4.0) + 1, np.ones(4))
    ones = spectral.TransmittanceCube.ones(3, 3, base.band_centers, base.band_fwhm)
    assert np.array_equal(spectral.inject(base, ones).radiance, base.radiance)
    t = np.ones((3, 3, 4))
    t[1, 2, 3] = 0.9
    out = spectral.inject(base, spectral.TransmittanceCube(t, base.band_centers, base.band_fwhm)).radiance
    assert out[1, 2, 3] == base.radiance[1, 2, 3] * 0.9
    mask = np.ones_like(out, bool)
    mask[1, 2, 3] = False
    assert np.array_equal(out[mask], base.radiance[mask])
    with pytest.raises(ShapeMismatchError):
        spectral.inject(base, np.ones((2, 3, 4)))


def test_preprocess_examples():
    assert spectral.preprocess(np.array([1.0]))[0] == 0.0
    assert spectral.preprocess(np.array([np.exp(10.0)]), check_range=True)[0] == pytest.approx(1.0)
    assert spectral.preprocess(np.array([1000.0]))[0] == pytest.approx(oracles.PREPROCESS_1000, abs=1e-4)
    with pytest.raises(InvalidInputError):
        spectral.preprocess(np.array([0.0]))


def test_zero_map_chain_is_identity(kit):
    cube = spectral.transmittance_cube(ConcentrationMap.zeros(4, 5), kit["table"], kit["srf"])
    assert np.all(cube.values == 1.0)
    base = HyperCube(np.full((4, 5, kit["srf"].bands), 3.0), kit["centers"], kit["fwhm"])
    assert np.array_equal(spectral.inject(base, cube).radiance, base.radiance)


def test_column_processing_equals_whole_image(kit):
    v = np.random.default_rng(3).uniform(0, 3000, (6, 5))
    v[:, 2] = 0
    cm = ConcentrationMap(v)
    a = spectral.transmittance_cube(cm, kit["table"], kit["srf"], by_column=True).values
    b = spectral.transmittance_cube(cm, kit["table"], kit["srf"], by_column=False).values
    assert np.array_equal(a, b)


def test_retrieve_enhancement_inverts_forward_chain(kit):
    for c in (50.0, 800.0, 5000.0):
        t = spectral.transmittance_cube(ConcentrationMap(np.array([[c]])), kit["table"], kit["srf"]).values[0, 0]
        assert spectral.retrieve_enhancement(t, kit["table"], kit["srf"]) == pytest.approx(c, rel=1e-3)
    assert spectral.retrieve_enhancement(np.ones(kit["srf"].bands), kit["table"], kit["srf"]) == 0.0
