"""A toy ice-sheet simulator and synthetic climate data for desk-scale runs.

The simulator is deliberately simple: thickness on a regular grid evolves by
temperature-dependent accumulation and melt plus linear diffusion. It is
smooth in its inputs and its final thickness can only fall when the forcing
warms, which is all the calibration pipeline needs from it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear
from scipy.special import expit

from .basis import CentredEnsemble, project
from .boundary import (BoundaryModel, default_spatial_cov, default_temporal_cov,
                       fit_boundary_model, generate_boundary, split_periods)
from .errors import ConfigError, DataError, ShapeError
from .history import binarize, THRESHOLD_BINARY
from .observations import ObservationSet

PARAM_NAMES = ("melt_factor", "accumulation", "elevation_feedback", "diffusion",
               "melt_offset", "snow_offset", "initial_scale")
PARAM_LOWER = (0.5, 0.2, 0.05, 0.02, -2.0, -2.0, 0.6)
PARAM_UPPER = (2.0, 1.0, 0.25, 0.20, 2.0, 2.0, 1.4)


@dataclass(frozen=True)
class ToySimulatorConfig:
    nx: int = 20
    ny: int = 15
    n_timesteps: int = 30
    param_names: tuple = PARAM_NAMES
    lower: tuple = PARAM_LOWER
    upper: tuple = PARAM_UPPER
    cell_area: float = 0.004

    def __post_init__(self):
        if self.nx * self.ny < 4:
            raise ConfigError("grid needs at least 4 cells")
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != (len(self.param_names),) or hi.shape != lo.shape:
            raise ConfigError("parameter bounds must match parameter names")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))) or np.any(hi < lo):
            raise ConfigError("parameter bounds must be finite with lower <= upper")

    @property
    def n_cells(self):
        return self.nx * self.ny

    @property
    def coords(self):
        """(x, y) of each cell, row-major with ``y`` (northward) varying slowest."""
        yy, xx = np.meshgrid(np.arange(self.ny), np.arange(self.nx), indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()]).astype(float)


def _initial_thickness(cfg):
    x, y = cfg.coords.T
    cx, cy = (cfg.nx - 1) / 2, cfg.ny
    return 35.0 * np.maximum(0.0, 1 - ((x - cx) / (0.6 * cfg.nx)) ** 2
                             - ((y - cy) / (0.75 * cfg.ny)) ** 2)


def _laplacian(h):
    p = np.pad(h, 1, mode="edge")
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4 * h


def toy_simulate(cfg: ToySimulatorConfig, x, T):
    """Thickness after each timestep, shape (n_timesteps, n_cells).

    ``T`` is a boundary field vector with location-major layout
    (``n_cells * n_timesteps``) or an (n_cells, n_timesteps) array.
    """
    x = np.asarray(x, dtype=float)
    T = np.asarray(T, dtype=float)
    if x.shape != (len(cfg.param_names),):
        raise ShapeError(f"expected {len(cfg.param_names)} parameters, got {x.shape}")
    if T.size != cfg.n_cells * cfg.n_timesteps:
        raise ShapeError("boundary field does not match the grid and timesteps")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(T))):
        raise DataError("non-finite simulator input")
    T = T.reshape(cfg.n_cells, cfg.n_timesteps)
    melt_f, acc_f, lam, diff, t_melt, t_snow, scale = x
    if not 0 <= diff <= 0.25:
        raise DataError("diffusion must lie in [0, 0.25] for a stable, monotone update")
    h = (scale * _initial_thickness(cfg)).reshape(cfg.ny, cfg.nx)
    out = np.empty((cfg.n_timesteps, cfg.n_cells))
    for t in range(cfg.n_timesteps):
        te = T[:, t].reshape(cfg.ny, cfg.nx) - lam * h
        melt = melt_f * np.logaddexp(0.0, te - t_melt)
        acc = acc_f * expit((t_snow - te) / 2.0)
        h = np.maximum(0.0, h + diff * _laplacian(h) + acc - melt)
        out[t] = h.ravel()
    return out


def ice_volume(thickness, cell_area):
    h = np.asarray(thickness, dtype=float)
    if np.any(h < 0):
        raise DataError("negative thickness")
    return float(h.sum() * cell_area)


def region_mask(cfg: ToySimulatorConfig, box):
    """Boolean cell mask for a half-open box ``(x0, x1, y0, y1)``."""
    x0, x1, y0, y1 = box
    x, y = cfg.coords.T
    return (x >= x0) & (x < x1) & (y >= y0) & (y < y1)


def extent_region(thickness, mask, threshold=THRESHOLD_BINARY):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ConfigError("region mask selects no cells")
    return binarize(np.asarray(thickness, dtype=float)[mask], threshold)


# ------------------------------------------------------------ synthetic data

@dataclass(frozen=True)
class TargetDef:
    """A simulator output used for calibration."""

    id: str
    kind: str
    time: int
    error_var: float = 0.0
    box: tuple = ()


DEFAULT_TARGETS = (
    TargetDef("vol21", "scalar", 4, 4.0),
    TargetDef("sw21", "binary", 4, box=(2, 8, 4, 9)),
    TargetDef("ce21", "binary", 4, box=(7, 13, 9, 14)),
    TargetDef("vol14", "scalar", 14, 1.416),
    TargetDef("reg14", "binary", 14, box=(4, 16, 7, 10)),
    TargetDef("vol10", "scalar", 20, 0.279),
    TargetDef("reg10", "binary", 20, box=(4, 16, 9, 12)),
    TargetDef("reg6", "binary", 26, box=(4, 16, 11, 14)),
)


@dataclass(frozen=True)
class SyntheticConfig:
    sim: ToySimulatorConfig = field(default_factory=ToySimulatorConfig)
    n_members: int = 12
    n_obs_locations: int = 6
    obs_fraction: float = 0.3
    obs_sd_range: tuple = (1.0, 2.5)
    field_var: float = 1.0
    spatial_length: float = 4.0
    temporal_length: float = 5.0
    n_t: int = 2
    n_s: int = 2
    expert_period: int = 1
    targets: tuple = DEFAULT_TARGETS
    truth_noise: bool = True
    truth_box_expand: float = 0.25
    prior_box_expand: float = 0.25


def _climate_run(cfg: SyntheticConfig, rng, spread=1.0):
    sim = cfg.sim
    x, y = sim.coords.T
    t = np.arange(sim.n_timesteps)
    amp = 18.0 + spread * 2.0 * rng.standard_normal()
    mid = 13.0 + spread * 2.5 * rng.standard_normal()
    width = 3.0 + spread * 0.8 * abs(rng.standard_normal())
    warming = amp * expit((t - mid) / width)
    base = -0.9 * y + 0.15 * (x - (sim.nx - 1) / 2)
    field = base[:, None] + warming[None, :]
    for a, b in split_periods(sim.n_timesteps, 3):
        kx, ky = rng.uniform(0.5, 2.0, 2)
        ph = rng.uniform(0, 2 * np.pi, 2)
        pattern = np.sin(kx * np.pi * x / sim.nx + ph[0]) * np.cos(ky * np.pi * y / sim.ny + ph[1])
        field[:, a:b] += spread * 1.5 * rng.standard_normal() * pattern[:, None]
    return field.ravel()


@dataclass(frozen=True, eq=False)
class SyntheticClimate:
    runs: np.ndarray
    latent: np.ndarray
    obs: ObservationSet
    sigma_s: np.ndarray
    sigma_t: np.ndarray
    sigma_t_obs: np.ndarray
    anchor: int


def synthetic_climate(cfg: SyntheticConfig, seed=0) -> SyntheticClimate:
    """Climate-model stand-in ensemble, a latent true field and sparse noisy records."""
    rng = np.random.default_rng(seed)
    sim = cfg.sim
    n_cells, n_times = sim.n_cells, sim.n_timesteps
    runs = np.column_stack([_climate_run(cfg, rng) for _ in range(cfg.n_members)])
    sigma_s = default_spatial_cov(sim.coords, cfg.spatial_length, cfg.field_var)
    sigma_t = default_temporal_cov(n_times, cfg.temporal_length, cfg.field_var)
    latent = _climate_run(cfg, rng, spread=1.3)
    # smooth departure from anything in the ensemble
    ls = np.linalg.cholesky(sigma_s)
    lt = np.linalg.cholesky(sigma_t)
    latent = latent + 0.5 * (ls @ rng.standard_normal((n_cells, n_times)) @ lt.T).ravel()

    locs = np.sort(rng.choice(n_cells, cfg.n_obs_locations, replace=False))
    n_entries = max(int(round(cfg.obs_fraction * locs.size * n_times)), locs.size)
    # one entry per record site, the rest anywhere else
    first = np.arange(locs.size) * n_times + rng.integers(n_times, size=locs.size)
    rest = np.setdiff1d(np.arange(locs.size * n_times), first)
    pick = np.r_[first, rng.choice(rest, n_entries - locs.size, replace=False)]
    grid = np.full((locs.size, n_times), np.nan)
    rows, cols = np.divmod(pick, n_times)
    sd = rng.uniform(*cfg.obs_sd_range, size=(locs.size, n_times))
    truth = latent.reshape(n_cells, n_times)[locs]
    grid[rows, cols] = truth[rows, cols] + sd[rows, cols] * rng.standard_normal(rows.size)
    obs = ObservationSet.from_grid(grid, sd, locs, n_cells)
    counts = np.bincount(obs.location, minlength=n_cells)
    anchor = int(np.argmax(counts))
    sigma_t_obs = np.diag(obs.per_time_error_var())
    return SyntheticClimate(runs, latent, obs, sigma_s, sigma_t, sigma_t_obs, anchor)


def expert_pattern(cfg: SyntheticConfig):
    """West-to-east gradient used as a hand-specified spatial vector."""
    x = cfg.sim.coords[:, 0]
    p = (x - x.mean()) / (x.max() - x.min())
    return p / np.linalg.norm(p)


def fit_synthetic_model(cfg: SyntheticConfig, climate: SyntheticClimate) -> BoundaryModel:
    ens = CentredEnsemble.from_runs(climate.runs)
    periods = split_periods(cfg.sim.n_timesteps, 3)
    expert = ((expert_pattern(cfg), cfg.expert_period),) if cfg.expert_period is not None else ()
    return fit_boundary_model(ens, climate.obs, climate.sigma_s, climate.sigma_t,
                              climate.sigma_t_obs, periods, [climate.anchor], cfg.n_t, cfg.n_s,
                              expert_vectors=expert)


def simulate_outputs(cfg: SyntheticConfig, x, T):
    """Calibration outputs of one run: volumes as floats, regions as thickness vectors."""
    h = toy_simulate(cfg.sim, x, T)
    out = {}
    for tg in cfg.targets:
        if tg.kind == "scalar":
            out[tg.id] = ice_volume(h[tg.time], cfg.sim.cell_area)
        else:
            out[tg.id] = h[tg.time][region_mask(cfg.sim, tg.box)]
    return out


def coefficient_bounds(model: BoundaryModel, runs, expand=0.5):
    """Prior box: range of the ensemble's coefficients widened by ``expand`` ranges each side."""
    c = project(model.vectors, None, np.asarray(runs, dtype=float), model.mu)
    lo, hi = c.min(axis=1), c.max(axis=1)
    pad = expand * (hi - lo)
    return lo - pad, hi + pad


def fit_records(model: BoundaryModel, obs: ObservationSet, bounds):
    """Coefficients inside ``bounds`` minimizing the error-weighted misfit to the records."""
    rows = obs.flat_index
    a = model.vectors[rows] / obs.error_sd[:, None]
    b = (obs.value - model.mu[rows]) / obs.error_sd
    return lsq_linear(a, b, bounds=bounds, method="bvls").x


@dataclass(frozen=True, eq=False)
class SyntheticTruth:
    climate: SyntheticClimate
    model: BoundaryModel
    x_star: np.ndarray
    c_star: np.ndarray
    c_bounds: tuple
    boundary: np.ndarray
    thickness: np.ndarray
    observations: dict


def synthetic_truth(cfg: SyntheticConfig, seed=0) -> SyntheticTruth:
    """Known ``(x*, c*)`` with boundary records and ice targets generated from it.

    The boundary model is fitted to the ensemble and the noisy records of a
    latent climate; ``c*`` is the box-constrained coefficient vector that best
    explains those records, and the true boundary is the conditioned field at
    ``c*``. Volumes carry Gaussian noise of each target's error variance and
    binary maps come from the true run without noise.
    """
    climate = synthetic_climate(cfg, seed)
    model = fit_synthetic_model(cfg, climate)
    rng = np.random.default_rng([seed, 1])
    lo, hi = np.asarray(cfg.sim.lower), np.asarray(cfg.sim.upper)
    x_star = lo + (hi - lo) * rng.uniform(0.15, 0.85, lo.size)
    c_star = fit_records(model, climate.obs,
                         coefficient_bounds(model, climate.runs, cfg.truth_box_expand))
    c_bounds = coefficient_bounds(model, climate.runs, cfg.prior_box_expand)
    boundary = generate_boundary(model, c_star, climate.obs, climate.sigma_s, climate.sigma_t,
                                 climate.sigma_t_obs)
    thickness = toy_simulate(cfg.sim, x_star, boundary)
    obs = {}
    for tg in cfg.targets:
        if tg.kind == "scalar":
            v = ice_volume(thickness[tg.time], cfg.sim.cell_area)
            if cfg.truth_noise and tg.error_var > 0:
                v += np.sqrt(tg.error_var) * rng.standard_normal()
            obs[tg.id] = v
        else:
            obs[tg.id] = extent_region(thickness[tg.time], region_mask(cfg.sim, tg.box))
    return SyntheticTruth(climate, model, x_star, c_star, c_bounds, boundary, thickness, obs)
