"""2-D advection-diffusion plume surrogate, snapshot ingestion and the
IME-versus-rate linearity check.

The model state is methane mass per cell (kg).  Snapshots convert it to
column enhancement in ppb through the per-pixel IME scale, so ``ime`` of a
snapshot equals the mass held in the domain.

Scheme: finite-volume, first-order upwind advection and explicit central
diffusion.  Boundaries are open to advective outflow (clean air flows in)
and carry no diffusive flux.  The mean wind blows west to east (towards
increasing column index).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import io as _io
from .core import (ConcentrationMap, ConfigurationError, FormatError,
                   IME_SCALE_KG_PER_PPB, InvalidInputError, PlumeSnapshot, ime,
                   ime_scale_for_pixel)
from .evaluation import linear_fit
from .plumeops import effective_wind
from .seeding import derive_seed

REFERENCE_RATES_KGPH = (500.0, 1000.0, 1500.0, 2000.0)
REFERENCE_WINDS_MPS = tuple(float(w) for w in range(1, 11))
SNAPSHOT_START_S = 3600.0


@dataclass(frozen=True)
class SimConfig:
    height: int = 256
    width: int = 256
    pixel_size: float = 30.0
    emission_rate: float = 1000.0          # kg/h
    wind_speed_u10: float = 5.0            # m/s
    eddy_diffusivity: float = 15.0         # m^2/s
    turbulence_intensity: float = 0.3
    #: correlation time of the wind perturbation (s); 0 gives white noise
    turbulence_timescale: float = 30.0
    source_pos: Optional[Tuple[int, int]] = None
    dt: Optional[float] = None             # None: largest stable dt dividing snapshot_interval
    duration: float = 9000.0
    snapshot_interval: float = 30.0
    snapshot_start: float = SNAPSHOT_START_S
    #: "effective" advects at 0.34*u10 + 0.44, "u10" at the 10 m wind itself
    transport: str = "effective"
    seed: int = 0

    @property
    def source(self) -> Tuple[int, int]:
        if self.source_pos is not None:
            return tuple(self.source_pos)
        return self.height // 2, self.width // 8

    @property
    def transport_speed(self) -> float:
        if self.transport == "effective":
            return effective_wind(self.wind_speed_u10)
        if self.transport == "u10":
            return float(self.wind_speed_u10)
        raise ConfigurationError(f"transport must be 'effective' or 'u10', got {self.transport!r}")

    def max_stable_dt(self) -> float:
        # the bound uses the larger of the 10 m wind and the transport speed
        speed = max(self.wind_speed_u10, self.transport_speed)
        limits = []
        if speed > 0:
            limits.append(self.pixel_size / speed)
        if self.eddy_diffusivity > 0:
            limits.append(self.pixel_size ** 2 / (4.0 * self.eddy_diffusivity))
        if not limits:
            return self.snapshot_interval
        return 0.5 * min(limits)

    def resolved_dt(self) -> float:
        if self.dt is not None:
            return float(self.dt)
        return self.snapshot_interval / math.ceil(self.snapshot_interval / self.max_stable_dt() - 1e-12)

    def validate(self) -> "SimConfig":
        if self.height < 1 or self.width < 1 or not self.pixel_size > 0:
            raise ConfigurationError("domain must be at least 1x1 with a positive pixel size")
        for name in ("emission_rate", "wind_speed_u10", "eddy_diffusivity", "turbulence_intensity",
                     "turbulence_timescale", "duration"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if not self.snapshot_interval > 0:
            raise ConfigurationError("snapshot_interval must be positive")
        r, c = self.source
        if not (0 <= r < self.height and 0 <= c < self.width):
            raise ConfigurationError(f"source {self.source} lies outside the domain")
        _ = self.transport_speed
        dt = self.resolved_dt()
        if not dt > 0:
            raise ConfigurationError("dt must be positive")
        if dt > self.max_stable_dt() * (1 + 1e-12):
            raise ConfigurationError(
                f"dt={dt} violates the stability bound {self.max_stable_dt():.6g} s")
        ratio = self.snapshot_interval / dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ConfigurationError(f"snapshot_interval {self.snapshot_interval} is not a multiple of dt {dt}")
        return self

    def snapshot_count(self) -> int:
        if self.duration < self.snapshot_start:
            return 0
        return int(math.floor((self.duration - self.snapshot_start) / self.snapshot_interval + 1e-9)) + 1


class PlumeModel:
    """Explicit time stepper; exposes its state so callers can audit each step."""

    def __init__(self, config: SimConfig):
        self.config = config.validate()
        self.dt = config.resolved_dt()
        self.dx = float(config.pixel_size)
        self.mass = np.zeros((config.height, config.width))
        self.time = 0.0
        self.steps = 0
        self.rng = np.random.default_rng(config.seed)
        self.perturbation = np.zeros(2)
        speed = config.transport_speed
        self.mean_velocity = np.array([0.0, speed])  # (row component, column component)
        self.sigma = config.turbulence_intensity * speed
        self.source_rate = config.emission_rate / 3600.0  # kg/s
        # advective speed budget left after diffusion, keeps the update positivity-preserving
        self.speed_budget = self.dx / self.dt - 4.0 * config.eddy_diffusivity / self.dx
        if self.sigma > 0:
            # draw the first perturbation from the stationary distribution
            self.perturbation = self.rng.normal(0.0, self.sigma, 2)

    def next_velocity(self) -> np.ndarray:
        """Velocity for the coming step: mean wind plus an AR(1) perturbation
        whose stationary std is ``turbulence_intensity * speed``."""
        if self.sigma > 0:
            tau = self.config.turbulence_timescale
            rho = math.exp(-self.dt / tau) if tau > 0 else 0.0
            self.perturbation = rho * self.perturbation + math.sqrt(1.0 - rho * rho) * self.rng.normal(0.0, self.sigma, 2)
        vel = self.mean_velocity + self.perturbation
        l1 = abs(vel[0]) + abs(vel[1])
        if l1 > self.speed_budget:
            vel = vel * (self.speed_budget / l1)
        return vel

    def step(self, velocity: Optional[np.ndarray] = None) -> Tuple[np.ndarray, float]:
        """Advance one step.  Returns ``(velocity, boundary_outflow_kg)``."""
        if velocity is None:
            velocity = self.next_velocity()
        vr, vc = float(velocity[0]), float(velocity[1])
        m = self.mass
        dt, dx = self.dt, self.dx
        a_r = vr * dt / dx
        a_c = vc * dt / dx
        kd = self.config.eddy_diffusivity * dt / dx ** 2

        # interior face fluxes (kg per step), positive towards increasing index
        up_c = m[:, :-1] if a_c >= 0 else m[:, 1:]
        flux_c = a_c * up_c + kd * (m[:, :-1] - m[:, 1:])
        up_r = m[:-1, :] if a_r >= 0 else m[1:, :]
        flux_r = a_r * up_r + kd * (m[:-1, :] - m[1:, :])

        new = m.copy()
        new[:, :-1] -= flux_c
        new[:, 1:] += flux_c
        new[:-1, :] -= flux_r
        new[1:, :] += flux_r

        # open boundaries: outflow where the velocity leaves the domain
        outflow = 0.0
        if a_c > 0:
            out = a_c * m[:, -1]
            new[:, -1] -= out
            outflow += out.sum()
        elif a_c < 0:
            out = -a_c * m[:, 0]
            new[:, 0] -= out
            outflow += out.sum()
        if a_r > 0:
            out = a_r * m[-1, :]
            new[-1, :] -= out
            outflow += out.sum()
        elif a_r < 0:
            out = -a_r * m[0, :]
            new[0, :] -= out
            outflow += out.sum()

        r, c = self.config.source
        new[r, c] += self.source_rate * dt
        self.mass = new
        self.steps += 1
        self.time = self.steps * dt
        return np.array([vr, vc]), float(outflow)

    def concentration(self) -> ConcentrationMap:
        k = ime_scale_for_pixel(self.dx)
        return ConcentrationMap(self.mass / k, self.dx)


def simulate_plume(config: SimConfig, check_positivity: bool = False) -> List[PlumeSnapshot]:
    """Integrate the surrogate and return snapshots from ``snapshot_start`` to
    ``duration`` every ``snapshot_interval`` seconds."""
    model = PlumeModel(config)
    steps_per_snap = int(round(config.snapshot_interval / model.dt))
    first_step = int(round(config.snapshot_start / model.dt))
    total = int(round(config.duration / model.dt + 1e-9))
    snaps = []
    n = config.snapshot_count()
    for _ in range(total):
        model.step()
        if check_positivity and np.any(model.mass < 0):
            raise AssertionError(f"negative mass after step {model.steps}")
        s = model.steps
        if s >= first_step and (s - first_step) % steps_per_snap == 0 and len(snaps) < n:
            snaps.append(PlumeSnapshot(model.concentration(), config.emission_rate,
                                       config.wind_speed_u10, s * model.dt))
    return snaps


def column_average(volume) -> ConcentrationMap:
    """Mean over the height axis of an ``H x W x Z`` concentration volume."""
    vol = np.asarray(volume, dtype=np.float64)
    if vol.ndim != 3:
        raise InvalidInputError(f"volume must be 3-D (H x W x Z), got shape {vol.shape}")
    if vol.shape[2] == 0:
        raise InvalidInputError("volume has zero height levels")
    return ConcentrationMap(vol.mean(axis=2))


def ingest_snapshots(path) -> List[PlumeSnapshot]:
    """Read every ``<name>.f32`` + ``<name>.json`` snapshot in a directory."""
    out = []
    for stem in _io.list_stems(path):
        try:
            out.append(_io.read_snapshot(stem))
        except FormatError:
            raise
        except (ValueError, OSError) as exc:
            raise FormatError(f"{stem}: {exc}") from None
    return out


def write_snapshots(directory, snapshots: Sequence[PlumeSnapshot], prefix: str = "snap") -> List:
    directory = _io.ensure_dir(directory)
    stems = []
    for i, s in enumerate(snapshots):
        stem = directory / (f"{prefix}_q{s.emission_rate:06.0f}_u{round(s.wind_speed_u10 * 100):05d}"
                            f"_t{s.sim_time:07.0f}_{i:05d}")
        _io.write_snapshot(stem, s)
        stems.append(stem)
    return stems


def linearity_check(snapshots: Sequence[PlumeSnapshot], k: float = IME_SCALE_KG_PER_PPB):
    """OLS of snapshot IME against emission rate: ``(slope, intercept, r_squared)``."""
    if len(snapshots) < 3:
        raise InvalidInputError("linearity check needs at least 3 snapshots")
    rates = np.array([s.emission_rate for s in snapshots])
    if np.unique(rates).size < 2:
        raise InvalidInputError("linearity check needs at least two distinct emission rates")
    imes = np.array([ime(s.map, k) for s in snapshots])
    return linear_fit(rates, imes)


@dataclass(frozen=True)
class SweepConfig:
    rates: Tuple[float, ...] = REFERENCE_RATES_KGPH
    winds: Tuple[float, ...] = REFERENCE_WINDS_MPS
    #: keep this many evenly spaced snapshots per run (None keeps all)
    snapshots_per_run: Optional[int] = None
    base: SimConfig = field(default_factory=SimConfig)


def sweep(config: SweepConfig, master_seed: int = 0, threads: int = 1) -> List[PlumeSnapshot]:
    """Run the rate x wind grid.  Each run's seed derives from
    ``(master_seed, rate index, wind index)``, so results do not depend on ``threads``."""
    jobs = []
    for i, q in enumerate(config.rates):
        for j, u in enumerate(config.winds):
            seed = derive_seed(master_seed, "plumesim", i, j)
            jobs.append(replace(config.base, emission_rate=float(q), wind_speed_u10=float(u), seed=seed))

    def run(cfg):
        snaps = simulate_plume(cfg)
        if config.snapshots_per_run is not None and len(snaps) > config.snapshots_per_run:
            idx = np.linspace(0, len(snaps) - 1, config.snapshots_per_run).round().astype(int)
            snaps = [snaps[i] for i in idx]
        return snaps

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    return [s for run_snaps in results for s in run_snaps]
