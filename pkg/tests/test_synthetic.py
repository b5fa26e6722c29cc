import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bchm.errors import ConfigError, DataError, ShapeError
from bchm.synthetic import (
    PARAM_LOWER, PARAM_UPPER, SyntheticConfig, ToySimulatorConfig, extent_region, ice_volume,
    region_mask, synthetic_climate, synthetic_truth, toy_simulate,
)

CFG = ToySimulatorConfig()
LO, HI = np.array(PARAM_LOWER), np.array(PARAM_UPPER)


def _x(u):
    return LO + (HI - LO) * np.asarray(u)


def _uniform_T(value):
    return np.full(CFG.n_cells * CFG.n_timesteps, float(value))


def test_extreme_warm_melts_everything():
    h = toy_simulate(CFG, _x(np.full(7, 0.5)), _uniform_T(40.0))
    assert np.all(h[-1] == 0)


def test_extreme_cold_without_melt_grows():
    x = _x(np.full(7, 0.5))
    x[0] = 0.0
    h = toy_simulate(CFG, x, _uniform_T(-40.0))
    vols = [ice_volume(v, CFG.cell_area) for v in h]
    assert np.all(np.diff(vols) >= -1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=7, max_size=7), st.integers(0, 2),
       st.floats(0.1, 5.0), st.integers(0, 10_000))
def test_warming_cannot_increase_volume(u, period, delta, seed):
    rng = np.random.default_rng(seed)
    T = (-8 + 4 * rng.standard_normal((CFG.n_cells, 1))
         + np.linspace(0, 12, CFG.n_timesteps)[None, :])
    warm = T.copy()
    a, b = [(0, 10), (10, 20), (20, 30)][period]
    warm[:, a:b] += delta
    x = _x(u)
    h0 = toy_simulate(CFG, x, T)
    h1 = toy_simulate(CFG, x, warm)
    assert np.all(h1 <= h0 + 1e-12)
    assert ice_volume(h1[-1], 1) <= ice_volume(h0[-1], 1) + 1e-12


def test_determinism_and_floor():
    rng = np.random.default_rng(0)
    T = rng.normal(-3, 4, CFG.n_cells * CFG.n_timesteps)
    x = _x(rng.random(7))
    a = toy_simulate(CFG, x, T)
    b = toy_simulate(CFG, x, T)
    assert np.array_equal(a, b)
    assert a.min() >= 0


def test_sensitivity_to_every_parameter():
    rng = np.random.default_rng(1)
    t = np.arange(CFG.n_timesteps)
    y = CFG.coords[:, 1]
    T = (-0.9 * y)[:, None] + 18 / (1 + np.exp(-(t - 13) / 3))[None, :]
    x0 = _x(np.full(7, 0.5))
    v0 = ice_volume(toy_simulate(CFG, x0, T)[20], CFG.cell_area)
    for k in range(7):
        x = x0.copy()
        x[k] += 0.01 * (HI[k] - LO[k])
        v = ice_volume(toy_simulate(CFG, x, T)[20], CFG.cell_area)
        assert abs(v - v0) > 1e-6, CFG.param_names[k]


def test_simulator_errors():
    x = _x(np.full(7, 0.5))
    with pytest.raises(ShapeError):
        toy_simulate(CFG, x, np.zeros(10))
    T = _uniform_T(0.0)
    T[3] = np.nan
    with pytest.raises(DataError):
        toy_simulate(CFG, x, T)
    with pytest.raises(ConfigError):
        ToySimulatorConfig(nx=1, ny=3)


def test_ice_volume():
    assert ice_volume(np.zeros(12), 2.0) == 0.0
    assert ice_volume(np.full(12, 3.0), 0.5) == pytest.approx(3.0 * 12 * 0.5)
    f = np.random.default_rng(2).random(300)
    assert ice_volume(f, 0.004) == pytest.approx(sum(v * 0.004 for v in f), rel=1e-12)
    with pytest.raises(DataError):
        ice_volume(np.array([1.0, -1.0]), 1.0)


def test_extent_region():
    mask = region_mask(CFG, (0, 3, 0, 2))
    assert mask.sum() == 6
    f = np.zeros(CFG.n_cells)
    f[mask] = 10.0
    assert np.array_equal(extent_region(f, mask), np.zeros(6))
    f[mask] = 10.0 + 1e-9
    assert np.array_equal(extent_region(f, mask), np.ones(6))
    g = np.random.default_rng(3).uniform(0, 20, CFG.n_cells)
    assert np.array_equal(extent_region(g, mask), (g[mask] > 10).astype(int))
    with pytest.raises(ConfigError):
        extent_region(g, np.zeros(CFG.n_cells, bool))


def test_climate_sparsity_and_reproducibility():
    cfg = SyntheticConfig()
    a = synthetic_climate(cfg, 5)
    b = synthetic_climate(cfg, 5)
    assert np.array_equal(a.obs.value, b.obs.value)
    want = cfg.obs_fraction * cfg.n_obs_locations * CFG.n_timesteps
    assert abs(len(a.obs) - want) <= 1
    assert np.unique(a.obs.location).size == cfg.n_obs_locations


@pytest.mark.parametrize("frac", [0.1, 0.5, 0.9])
def test_climate_sparsity_fractions(frac):
    cfg = SyntheticConfig(obs_fraction=frac)
    c = synthetic_climate(cfg, 0)
    assert abs(len(c.obs) - frac * cfg.n_obs_locations * CFG.n_timesteps) <= 1


def test_truth_noise_free_targets():
    cfg = SyntheticConfig(truth_noise=False)
    tr = synthetic_truth(cfg, 0)
    for tg in cfg.targets:
        if tg.kind == "scalar":
            assert tr.observations[tg.id] == ice_volume(tr.thickness[tg.time], CFG.cell_area)
        else:
            assert np.array_equal(tr.observations[tg.id],
                                  extent_region(tr.thickness[tg.time], region_mask(CFG, tg.box)))
    assert tr.model.n_coefficients == 13
    lo, hi = tr.c_bounds
    assert np.all((tr.c_star >= lo) & (tr.c_star <= hi))
    again = synthetic_truth(cfg, 0)
    assert np.array_equal(again.c_star, tr.c_star)
    assert np.array_equal(again.x_star, tr.x_star)
