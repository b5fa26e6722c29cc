import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg

from bchm.emulator import (
    GpEmulator, fit_gp, from_dict, load_emulator, loo, predict, sample_posterior,
    save_emulator, to_dict, write_loo_csv, _corr, _mean_basis,
)
from bchm.errors import MissingInputError, PreconditionError, ShapeError


@pytest.fixture(scope="module")
def sine_em():
    x = np.linspace(0, 2 * np.pi, 15)[:, None]
    return fit_gp(x, np.sin(x[:, 0]), mean_spec="constant", seed=1)


@pytest.fixture(scope="module")
def em2d():
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 1, (30, 2))
    y = np.sin(3 * x[:, 0]) + x[:, 1] ** 2
    return fit_gp(x, y, mean_spec="linear", seed=0, bounds=([0.0, 0.0], [1.0, 1.0]))


def test_constant_targets():
    x = np.random.default_rng(0).uniform(size=(8, 2))
    with pytest.warns(RuntimeWarning, match="zero variance"):
        em = fit_gp(x, np.full(8, 5.0))
    mean, var = predict(em, np.array([[0.3, 0.4], [0.9, 0.1]]))
    assert np.allclose(mean, 5.0)
    assert np.all(var < 1e-8)


def test_linear_function_reproduced():
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, (12, 3))
    f = lambda a: 2.0 + a @ np.array([1.5, -0.7, 3.0])
    em = fit_gp(x, f(x), mean_spec="linear", seed=0)
    xt = rng.uniform(0, 1, (5, 3))
    mean, _ = predict(em, xt)
    assert np.allclose(mean, f(xt), rtol=1e-6)


def test_sine_loo(sine_em):
    _, _, z = loo(sine_em)
    assert np.sum(np.abs(z) < 3) >= 14


def test_interpolation(em2d, sine_em):
    for em in (em2d, sine_em):
        mean, var = predict(em, em.inputs)
        assert np.all(np.abs(mean - em.targets) <= 3 * np.sqrt(em.nugget_var))
        assert np.all(np.abs(mean - em.targets) <= 3 * np.sqrt(var))


def test_variance_floor_and_prior_reversion():
    x = np.linspace(0, 1, 10)[:, None]
    em = fit_gp(x, np.sin(6 * x[:, 0]), mean_spec="constant", bounds=([0.0], [1.0]))
    with pytest.warns(RuntimeWarning, match="outside"):
        mean, var = predict(em, np.array([[1e4]]))
    assert mean[0] == pytest.approx(em.beta[0], abs=1e-9)
    assert var[0] >= em.signal_var + em.nugget_var - 1e-12
    _, v = predict(em, x)
    assert np.all(v >= em.nugget_var)


def test_batch_equals_loop(em2d):
    xs = np.random.default_rng(5).uniform(size=(7, 2))
    mb, vb = predict(em2d, xs)
    for i, x in enumerate(xs):
        m, v = predict(em2d, x)
        assert m == pytest.approx(mb[i], rel=1e-10, abs=1e-12)
        assert v == pytest.approx(vb[i], rel=1e-10)


def test_shape_error(em2d):
    with pytest.raises(ShapeError):
        predict(em2d, np.zeros(3))


def test_linear_mean_needs_runs():
    with pytest.raises(PreconditionError):
        fit_gp(np.random.default_rng(0).uniform(size=(4, 3)), np.arange(4.0), mean_spec="linear")


def _dense_var(em, x):
    """Universal-kriging variance from the explicit block system."""
    xn = em.normalize(em.inputs)
    xs = em.normalize(x)
    g = em.nugget_var / em.signal_var
    r = _corr(xn, xn, em.length_scales) + g * np.eye(len(xn))
    h = _mean_basis(xn, em.mean_spec)
    rx = _corr(xs, xn, em.length_scales)[0]
    hx = _mean_basis(xs, em.mean_spec)[0]
    p = h.shape[1]
    big = np.block([[r, h], [h.T, np.zeros((p, p))]])
    rhs = np.r_[rx, hx]
    sol = np.linalg.solve(big, rhs)
    return em.signal_var * (1 + g - rhs @ sol)


def test_variance_matches_block_system(em2d):
    x = np.array([[0.21, 0.77]])
    _, v = predict(em2d, x)
    assert v[0] == pytest.approx(_dense_var(em2d, x), rel=1e-8)


def test_loo_matches_refit(em2d):
    mean, var, z = loo(em2d)
    for i in (0, 7, 29):
        keep = np.arange(len(em2d.targets)) != i
        sub = GpEmulator(em2d.inputs[keep], em2d.targets[keep], em2d.lower, em2d.upper,
                         em2d.mean_spec, em2d.length_scales, em2d.signal_var, em2d.nugget_var)
        m, v = predict(sub, em2d.inputs[i])
        assert m == pytest.approx(mean[i], rel=1e-7, abs=1e-9)
        assert v == pytest.approx(var[i], rel=1e-7)


def test_sample_posterior(em2d):
    x = np.array([0.33, 0.61])
    a = sample_posterior(em2d, x, 100, seed=4)
    b = sample_posterior(em2d, x, 100, seed=4)
    assert np.array_equal(a, b) and a.shape == (100,)
    s = sample_posterior(em2d, x, 100_000, seed=9)
    m, v = predict(em2d, x)
    se = np.sqrt(v / s.size)
    assert abs(s.mean() - m) < 3 * se
    # sample variance SE ~ v*sqrt(2/(n-1))
    assert abs(s.var(ddof=1) - v) < 3 * v * np.sqrt(2 / (s.size - 1))
    assert sample_posterior(em2d, np.array([[0.1, 0.2], [0.4, 0.5]]), 3, seed=0).shape == (2, 3)
    with pytest.raises(ValueError):
        sample_posterior(em2d, x, 0)


def test_sample_at_training_point():
    x = np.linspace(0, 1, 8)[:, None]
    em = GpEmulator(x, np.cos(3 * x[:, 0]), np.zeros(1), np.ones(1), "constant", np.array([0.3]),
                    1.0, 1e-10)
    s = sample_posterior(em, x[3], 50, seed=0)
    assert np.allclose(s, em.targets[3], atol=1e-3)


def test_restart_determinism():
    rng = np.random.default_rng(11)
    x = rng.uniform(size=(20, 3))
    y = np.sin(4 * x[:, 0]) * x[:, 2]
    a = fit_gp(x, y, seed=5, n_restarts=3)
    b = fit_gp(x, y, seed=5, n_restarts=3)
    assert np.array_equal(a.length_scales, b.length_scales)
    assert a.signal_var == b.signal_var


@settings(max_examples=10, deadline=None)
@given(scale=st.floats(0.1, 100.0), shift=st.floats(-50.0, 50.0))
def test_affine_input_invariance(scale, shift):
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(14, 2))
    y = np.cos(3 * x[:, 0]) + x[:, 1]
    e1 = fit_gp(x, y, mean_spec="constant", n_restarts=2, seed=0, bounds=([0.0] * 2, [1.0] * 2))
    e2 = fit_gp(x * scale + shift, y, mean_spec="constant", n_restarts=2, seed=0,
                bounds=([shift] * 2, [scale + shift] * 2))
    xt = rng.uniform(size=(4, 2)) * 0.8 + 0.1
    m1, v1 = predict(e1, xt)
    m2, v2 = predict(e2, xt * scale + shift)
    assert np.allclose(m1, m2, rtol=1e-5, atol=1e-7)
    assert np.allclose(v1, v2, rtol=1e-4, atol=1e-10)


def test_save_load_roundtrip(tmp_path, em2d):
    p = tmp_path / "em.json"
    save_emulator(em2d, p)
    em = load_emulator(p)
    x = np.array([[0.4, 0.2]])
    assert np.array_equal(predict(em, x)[0], predict(em2d, x)[0])
    assert json.loads(p.read_text()) == to_dict(from_dict(to_dict(em2d)))
    with pytest.raises(MissingInputError):
        load_emulator(tmp_path / "nope.json")
    write_loo_csv(em2d, tmp_path / "loo.csv")
    lines = (tmp_path / "loo.csv").read_text().splitlines()
    assert lines[0] == "index,target,loo_mean,loo_var,z" and len(lines) == 31


def test_linear_mean_skips_inputs_fixed_across_design():
    r = np.random.default_rng(21)
    x = np.column_stack([r.random(20), np.full(20, 0.4), r.random(20)])
    y = 2 * x[:, 0] - x[:, 2] + 0.1 * np.sin(6 * x[:, 0])
    em = fit_gp(x, y, "linear", n_restarts=2, seed=0, bounds=([0, 0, 0], [1, 1, 1]))
    assert em.mean_inputs == (0, 2)
    mean, _ = predict(em, x)
    np.testing.assert_allclose(mean, y, atol=3 * np.sqrt(em.nugget_var) + 1e-6)
    assert from_dict(to_dict(em)).mean_inputs == (0, 2)
