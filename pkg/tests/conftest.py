import time

import numpy as np
import pytest

from ch4plume import plumesim, scenes, spectral

SWEEP_WINDS = (1.0, 4.0, 7.0, 10.0)
SWEEP_SNAPSHOTS = 20

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def criterion():
    """Record ``(number, passed, detail)`` for the acceptance summary.  A
    criterion with several tests passes only if every one of them does."""
    def record(n, ok, detail):
        prev_ok, prev_detail = _RESULTS.get(n, (True, ""))
        joined = f"{prev_detail}; {detail}" if prev_detail else detail
        _RESULTS[n] = (prev_ok and bool(ok), joined)
    return record


@pytest.fixture(scope="session")
def kit():
    """Absorption table, EnMAP-like bands, SRF and unit optical depth."""
    table = scenes.default_absorption_table()
    centers, fwhm = scenes.enmap_like_bands()
    srf = spectral.build_srf(centers, fwhm, table.wavelengths)
    return {"table": table, "centers": centers, "fwhm": fwhm, "srf": srf,
            "unit_depth": spectral.unit_depth(table, srf)}


@pytest.fixture(scope="session")
def sweep_snapshots():
    """Desk-scale surrogate sweep: 4 rates x 4 winds x 20 snapshots on the
    default 256 x 256 grid.  Returns ``(snapshots, seconds)``."""
    t0 = time.perf_counter()
    cfg = plumesim.SweepConfig(rates=plumesim.REFERENCE_RATES_KGPH, winds=SWEEP_WINDS,
                               snapshots_per_run=SWEEP_SNAPSHOTS)
    snaps = plumesim.sweep(cfg, master_seed=0)
    return snaps, time.perf_counter() - t0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
