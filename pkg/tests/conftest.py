import numpy as np
import pytest


def random_spd(n, rng, jitter=0.5):
    a = rng.standard_normal((n, n))
    return a @ a.T / n + jitter * np.eye(n)


def dense_posterior_mean(h, sigma_s, sigma_t, sigma_t_obs, obs_flat, obs_val):
    """E[T | z_obs] with T ~ N(h, Ss(x)St) and z = T + e, e ~ N(0, Ss(x)St'), by brute force."""
    k_field = np.kron(sigma_s, sigma_t)
    k_obs = k_field + np.kron(sigma_s, sigma_t_obs)
    k_tz = k_field[:, obs_flat]
    k_zz = k_obs[np.ix_(obs_flat, obs_flat)]
    return h + k_tz @ np.linalg.solve(k_zz, obs_val - h[obs_flat])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_boundary_problem(seed=0, n_loc=6, n_times=9, n_members=6, missing=0.3):
    """Tiny gridded ensemble + sparse observations for boundary-model tests."""
    from bchm.basis import CentredEnsemble
    from bchm.boundary import default_spatial_cov, default_temporal_cov
    from bchm.observations import ObservationSet

    r = np.random.default_rng(seed)
    x = np.linspace(0, 1, n_loc)
    t = np.arange(n_times)
    base = (np.sin(3 * x)[:, None] + 0.2 * t[None, :]).ravel()
    runs = []
    for _ in range(n_members):
        amp = r.standard_normal(4)
        f = (amp[0] * np.cos(2 * x)[:, None] * np.ones(n_times)
             + amp[1] * np.outer(x, np.sin(t / 2.0))
             + amp[2] * np.outer(np.ones(n_loc), np.cos(t / 3.0))
             + amp[3] * np.outer(x ** 2, t / n_times))
        runs.append(base + f.ravel() + 0.05 * r.standard_normal(n_loc * n_times))
    ens = CentredEnsemble.from_runs(np.array(runs).T)
    truth = ens.mean + ens.data @ r.standard_normal(n_members) * 0.5 + 0.3 * np.repeat(x, n_times)
    grid = truth.reshape(n_loc, n_times) + 0.05 * r.standard_normal((n_loc, n_times))
    grid[r.random(grid.shape) < missing] = np.nan
    grid[0, :] = truth.reshape(n_loc, n_times)[0]
    obs = ObservationSet.from_grid(grid, 0.1)
    sigma_s = default_spatial_cov(x[:, None], 0.3)
    sigma_t = default_temporal_cov(n_times, 2.0)
    sigma_t_obs = np.diag(obs.per_time_error_var())
    return ens, obs, sigma_s, sigma_t, sigma_t_obs


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
