"""End-to-end history matching of the toy simulator against a synthetic truth.

The stages used by ``run_synthetic`` are exposed separately so the command
line front end can run them one at a time from files.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from importlib import resources

import numpy as np
import yaml

from .basis import CentredEnsemble
from .boundary import BoundaryModel, generate_boundary
from .errors import ConfigError
from .history import (NroySpace, OutputSpec, PriorSpace, WaveState, in_prior_space,
                      initial_state, nroy_resample, prior_coeff_space, run_wave)
from .observations import ObservationSet
from .synthetic import (SyntheticConfig, SyntheticTruth, coefficient_bounds, ice_volume,
                        region_mask, synthetic_truth, toy_simulate)


def load_output_table(path=None):
    """Output definitions and wave rules; the packaged worked-example table by default."""
    if path is None:
        text = resources.files("bchm.data").joinpath("table1.yaml").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict) or "outputs" not in doc or "waves" not in doc:
        raise ConfigError("output table needs 'outputs' and 'waves'")
    return doc["outputs"], doc["waves"]


def build_specs(rows, observations, cfg: SyntheticConfig):
    """OutputSpecs for the table rows; region sizes come from the observed maps.

    Every bound expression is evaluated here so a malformed one fails early.
    """
    targets = {t.id: t for t in cfg.targets}
    specs = []
    for row in rows:
        sid = row["id"]
        if sid not in targets:
            raise ConfigError(f"spec {sid} has no simulator target")
        if sid not in observations:
            raise ConfigError(f"spec {sid} has no observation")
        obs = observations[sid]
        kind = row["kind"]
        if kind == "binary":
            obs = np.asarray(obs, dtype=float)
        ell = 1 if kind == "scalar" else int(np.size(obs))
        spec = OutputSpec(sid, kind, tuple(row["waves"]), ell, obs, row["bound"],
                          sigma_e=float(row.get("sigma_e", 0.0)),
                          sigma_eta=float(row.get("sigma_eta", 0.0)),
                          binary_summary=row.get("binary_summary", "probability"),
                          threshold=float(row.get("threshold", 10.0)))
        spec.bound_value
        specs.append(spec)
    return tuple(specs)


def specs_for_truth(rows, truth: SyntheticTruth, cfg: SyntheticConfig):
    """OutputSpecs with observations and region sizes taken from the synthetic truth."""
    return list(build_specs(rows, truth.observations, cfg))


@dataclass(frozen=True, eq=False)
class BoundaryMap:
    """The conditioned boundary field is affine in ``c``: ``offset + matrix @ c``."""

    offset: np.ndarray
    matrix: np.ndarray

    @classmethod
    def build(cls, model: BoundaryModel, obs, sigma_s, sigma_t, sigma_t_obs):
        def gen(c):
            return generate_boundary(model, c, obs, sigma_s, sigma_t, sigma_t_obs)
        k = model.n_coefficients
        base = gen(np.zeros(k))
        cols = [gen(e) - base for e in np.eye(k)]
        return cls(base, np.column_stack(cols))

    def __call__(self, c):
        c = np.asarray(c, dtype=float)
        return self.offset + c @ self.matrix.T


@dataclass(frozen=True)
class PipelineSettings:
    n_design: int = 150
    prior_j: int = 2
    prior_draws: int = 2_000_000
    mc_points: int = 50_000
    m_samples: int = 100
    n_restarts: int = 3
    frac_best: float = 0.2
    pool_factor: int = 20
    workers: int = 1


@dataclass(frozen=True, eq=False)
class Problem:
    """A fitted boundary model, its records and the calibration outputs of the toy simulator."""

    cfg: SyntheticConfig
    model: BoundaryModel
    obs: ObservationSet
    sigma_s: np.ndarray
    sigma_t: np.ndarray
    sigma_t_obs: np.ndarray
    c_bounds: tuple
    specs: tuple

    @classmethod
    def from_truth(cls, truth: SyntheticTruth, cfg: SyntheticConfig, rows):
        cl = truth.climate
        return cls(cfg, truth.model, cl.obs, cl.sigma_s, cl.sigma_t, cl.sigma_t_obs,
                   truth.c_bounds, build_specs(rows, truth.observations, cfg))

    @classmethod
    def from_inputs(cls, cfg: SyntheticConfig, model, runs, obs, sigma_s, sigma_t, sigma_t_obs,
                    rows, observations):
        """Problem from an ensemble on disk; the prior box is the widened ensemble range."""
        if CentredEnsemble.from_runs(runs).hash != model.ensemble_hash:
            raise ConfigError("boundary model was fitted on a different ensemble")
        return cls(cfg, model, obs, sigma_s, sigma_t, sigma_t_obs,
                   coefficient_bounds(model, runs, cfg.prior_box_expand),
                   build_specs(rows, observations, cfg))

    @property
    def dx(self):
        return len(self.cfg.sim.param_names)

    @property
    def bounds(self):
        sim = self.cfg.sim
        return (np.r_[np.asarray(sim.lower, float), self.c_bounds[0]],
                np.r_[np.asarray(sim.upper, float), self.c_bounds[1]])

    @cached_property
    def boundary_map(self):
        return BoundaryMap.build(self.model, self.obs, self.sigma_s, self.sigma_t,
                                 self.sigma_t_obs)

    def prior_space(self, settings: PipelineSettings, seed) -> PriorSpace:
        return prior_coeff_space(self.model, self.obs, self.c_bounds, settings.prior_j,
                                 settings.prior_draws, seed=[seed, 2])

    def sampler(self, prior_samples):
        """Draws ``x`` uniformly and ``c`` from the accepted coefficient samples."""
        sim = self.cfg.sim
        xlo, xhi = np.asarray(sim.lower, float), np.asarray(sim.upper, float)
        pool_c = np.asarray(prior_samples, dtype=float)

        def draw(n, rng):
            x = xlo + (xhi - xlo) * rng.random((n, xlo.size))
            return np.hstack([x, pool_c[rng.integers(pool_c.shape[0], size=n)]])
        return draw

    def initial_state(self, prior: PriorSpace, settings: PipelineSettings, seed) -> WaveState:
        """Wave-0 state over a fixed Monte-Carlo pool drawn from the coefficient space."""
        j, dx = settings.prior_j, self.dx

        def in_c(points):
            return in_prior_space(self.model, self.obs, points[:, dx:], j)

        mc = self.sampler(prior.samples)(settings.mc_points, np.random.default_rng([seed, 3]))
        return initial_state(in_c, self.bounds, mc, prior.acceptance)

    def design(self, space: NroySpace, prior_samples, settings: PipelineSettings, wave, seed):
        """Design for wave ``wave`` (1-based) inside ``space``."""
        frac_best = 0.0 if wave == 1 else settings.frac_best
        return nroy_resample(space, self.bounds, settings.n_design, frac_best,
                             seed=[seed, 9 + wave], sampler=self.sampler(prior_samples),
                             pool_factor=settings.pool_factor)

    def simulate(self, design, workers=1):
        """Spec outputs (volumes or region thickness) and volume series for each design point."""
        design = np.atleast_2d(np.asarray(design, dtype=float))
        fields = self.boundary_map(design[:, self.dx:])
        sim = self.cfg.sim
        targets = {t.id: t for t in self.cfg.targets}

        def one(i):
            return toy_simulate(sim, design[i, :self.dx], fields[i])

        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            runs = list(pool.map(one, range(design.shape[0])))
        out = {}
        for s in self.specs:
            tg = targets[s.id]
            if tg.kind == "scalar":
                out[s.id] = np.array([ice_volume(h[tg.time], sim.cell_area) for h in runs])
            else:
                mask = region_mask(sim, tg.box)
                out[s.id] = np.array([h[tg.time][mask] for h in runs])
        series = np.array([h.sum(axis=1) * sim.cell_area for h in runs])
        return out, series


@dataclass(frozen=True, eq=False)
class PipelineResult:
    truth: SyntheticTruth
    prior: PriorSpace
    bounds: tuple
    states: tuple
    designs: tuple
    outputs: tuple
    truth_kept: tuple

    @property
    def fractions(self):
        return self.states[-1].fractions


def run_synthetic(cfg: SyntheticConfig = None, settings: PipelineSettings = None, seed=0,
                  table=None, n_waves=None, progress=None) -> PipelineResult:
    """Fit, design, simulate, emulate and rule out over the configured waves."""
    cfg = cfg or SyntheticConfig()
    settings = settings or PipelineSettings()
    rows, waves = table or load_output_table()
    n_waves = len(waves) if n_waves is None else n_waves
    truth = synthetic_truth(cfg, seed)
    problem = Problem.from_truth(truth, cfg, rows)
    say = progress or (lambda msg: None)

    prior = problem.prior_space(settings, seed)
    if prior.samples.shape[0] == 0:
        raise ConfigError("coefficient space is empty; widen the prior box or records error")
    say(f"coefficient space: {prior.samples.shape[0]} accepted ({prior.acceptance:.4%})")
    state = problem.initial_state(prior, settings, seed)
    star = np.r_[truth.x_star, truth.c_star][None, :]
    states, designs, outputs, kept = [state], [], [], [bool(state.space.contains(star)[0])]
    for w in range(1, n_waves + 1):
        state, design, out = advance_wave(problem, state, prior, waves[w - 1], settings, w, seed)
        states.append(state)
        designs.append(design)
        outputs.append(out)
        kept.append(bool(state.space.contains(star)[0]))
        say(f"wave {w}: fraction {state.fraction:.3e}, truth kept {kept[-1]}")
    return PipelineResult(truth, prior, problem.bounds, tuple(states), tuple(designs),
                          tuple(outputs), tuple(kept))


def advance_wave(problem: Problem, state: WaveState, prior: PriorSpace, rule, settings, wave,
                 seed, design=None, outputs=None):
    """Design, simulate and emulate one wave; returns (state, design, outputs)."""
    if design is None:
        design = problem.design(state.space, prior.samples, settings, wave, seed)
    if outputs is None:
        outputs, _ = problem.simulate(design, settings.workers)
    state = run_wave(state, design, outputs, problem.specs, rule.get("combine", "all"),
                     rule.get("j", 1), settings.m_samples, settings.n_restarts,
                     seed=seed * 1000 + wave - 1)
    return state, design, outputs
