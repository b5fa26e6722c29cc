import numpy as np
import pytest

from bchm.boundary import generate_boundary
from bchm.errors import ConfigError
from bchm.pipeline import (BoundaryMap, PipelineSettings, Problem, build_specs, load_output_table,
                           run_synthetic)
from bchm.synthetic import SyntheticConfig, simulate_outputs, synthetic_truth

TINY = PipelineSettings(n_design=25, prior_draws=40_000, mc_points=2_000, m_samples=20,
                        n_restarts=1)


@pytest.fixture(scope="module")
def truth():
    return synthetic_truth(SyntheticConfig(), seed=5)


@pytest.fixture(scope="module")
def problem(truth):
    rows, _ = load_output_table()
    return Problem.from_truth(truth, SyntheticConfig(), rows)


def test_boundary_map_matches_direct_generation(truth, problem):
    rng = np.random.default_rng(0)
    lo, hi = truth.c_bounds
    cl = truth.climate
    for c in lo + (hi - lo) * rng.random((4, lo.size)):
        direct = generate_boundary(truth.model, c, cl.obs, cl.sigma_s, cl.sigma_t, cl.sigma_t_obs)
        np.testing.assert_allclose(problem.boundary_map(c), direct, rtol=1e-9, atol=1e-9)


def test_truth_boundary_is_the_map_at_c_star(truth, problem):
    np.testing.assert_allclose(problem.boundary_map(truth.c_star), truth.boundary, atol=1e-9)


def test_simulate_matches_single_runs(truth, problem):
    rng = np.random.default_rng(1)
    lo, hi = problem.bounds
    design = lo + (hi - lo) * rng.random((3, lo.size))
    out, series = problem.simulate(design, workers=2)
    fields = problem.boundary_map(design[:, problem.dx:])
    for i in range(3):
        ref = simulate_outputs(problem.cfg, design[i, :problem.dx], fields[i])
        for sid, y in out.items():
            np.testing.assert_allclose(y[i], ref[sid], rtol=1e-12)
    assert series.shape == (3, problem.cfg.sim.n_timesteps)


def test_specs_take_region_size_from_observations(truth, problem):
    ell = {s.id: s.ell for s in problem.specs}
    assert ell["vol21"] == 1
    assert ell["sw21"] == truth.observations["sw21"].size
    bounds = {s.id: s.bound_value for s in problem.specs}
    assert bounds["sw21"] == pytest.approx(0.25 * ell["sw21"])
    assert bounds["vol14"] == 9.0


def test_specs_reject_unknown_output(truth):
    rows = [{"id": "nope", "kind": "scalar", "waves": [1], "bound": "9"}]
    with pytest.raises(ConfigError, match="nope"):
        build_specs(rows, truth.observations, SyntheticConfig())


def test_small_run_is_deterministic_and_nested():
    a = run_synthetic(settings=TINY, seed=7, n_waves=2)
    b = run_synthetic(settings=TINY, seed=7, n_waves=2)
    assert a.fractions == b.fractions
    for da, db in zip(a.designs, b.designs):
        np.testing.assert_array_equal(da, db)
    f = a.fractions
    assert all(x >= y for x, y in zip(f, f[1:]))
    masks = [s.pool_mask for s in a.states]
    for outer, inner in zip(masks, masks[1:]):
        assert not np.any(inner & ~outer)
    lo, hi = a.bounds
    for d in a.designs:
        assert np.all((d >= lo) & (d <= hi))
