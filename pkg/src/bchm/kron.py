"""Gaussian fields with separable covariance ``Sigma_s (x) Sigma_t``.

Field vectors use a location-major layout: entry ``s * n_times + t`` holds the
value at spatial location ``s`` and time ``t``. Reshaping a vector to
``(n_locations, n_times)`` gives one time series per row, and with this
layout ``Cov(v) = kron(Sigma_s, Sigma_t)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import (DataError, FactorizationError, MissingInputError,
                     ModelAssumptionError, PreconditionError, ShapeError)

NUGGET_REL = 1e-8


def cholesky(a, name="matrix", nugget_rel=NUGGET_REL):
    """Lower Cholesky factor, retrying once with a relative diagonal nugget."""
    a = np.asarray(a, dtype=float)
    try:
        return linalg.cholesky(a, lower=True)
    except linalg.LinAlgError:
        pass
    jitter = nugget_rel * max(float(np.mean(np.diag(a))), np.finfo(float).tiny)
    try:
        return linalg.cholesky(a + jitter * np.eye(a.shape[0]), lower=True)
    except linalg.LinAlgError as exc:
        raise FactorizationError(f"{name} is not positive definite") from exc


def _check_symmetric(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} has non-finite entries")
    scale = max(np.abs(a).max(), np.finfo(float).tiny)
    if np.abs(a - a.T).max() > 1e-10 * scale:
        raise ShapeError(f"{name} is not symmetric")
    return 0.5 * (a + a.T)


@dataclass(frozen=True, eq=False)
class KroneckerCov:
    """Covariance ``kron(sigma_s, sigma_t)`` held as its two factors."""

    sigma_s: np.ndarray
    sigma_t: np.ndarray
    nugget_rel: float = NUGGET_REL

    def __post_init__(self):
        object.__setattr__(self, "sigma_s", _check_symmetric(self.sigma_s, "sigma_s"))
        object.__setattr__(self, "sigma_t", _check_symmetric(self.sigma_t, "sigma_t"))
        # factorize eagerly so invalid factors fail at construction
        self.chol_s, self.chol_t

    @property
    def n_locations(self):
        return self.sigma_s.shape[0]

    @property
    def n_times(self):
        return self.sigma_t.shape[0]

    @property
    def dim(self):
        return self.n_locations * self.n_times

    @cached_property
    def chol_s(self):
        return cholesky(self.sigma_s, "sigma_s", self.nugget_rel)

    @cached_property
    def chol_t(self):
        return cholesky(self.sigma_t, "sigma_t", self.nugget_rel)

    def restrict(self, locations):
        """Covariance of the sub-field at the given spatial locations."""
        idx = np.asarray(locations, dtype=int)
        return KroneckerCov(self.sigma_s[np.ix_(idx, idx)], self.sigma_t, self.nugget_rel)

    def dense(self):
        """Materialize the full matrix. Intended for small instances only."""
        return np.kron(self.sigma_s, self.sigma_t)

    def apply(self, v):
        a = self._as_grid(v)
        return (self.sigma_s @ a @ self.sigma_t.T).ravel()

    def solve(self, v):
        return kron_inverse_apply(self, v)

    def _as_grid(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.dim:
            raise ShapeError(f"vector length {v.shape[0]} does not match {self.n_locations}x{self.n_times}")
        return v.reshape((self.n_locations, self.n_times) + v.shape[1:])


def as_grid(v, n_times):
    """View a field vector as a (locations x times) array."""
    v = np.asarray(v, dtype=float)
    if v.size % n_times:
        raise ShapeError(f"length {v.size} is not a multiple of n_times={n_times}")
    return v.reshape(-1, n_times)


def kron_inverse_apply(cov: KroneckerCov, v):
    """Return ``kron(sigma_s, sigma_t)^-1 v`` using the factor inverses only.

    ``v`` may be a single vector or a matrix whose columns are vectors.
    """
    v = np.asarray(v, dtype=float)
    if v.shape[0] != cov.dim:
        raise ShapeError(f"vector length {v.shape[0]} does not match {cov.n_locations}x{cov.n_times}")
    if v.ndim == 2:
        return np.column_stack([kron_inverse_apply(cov, col) for col in v.T])
    a = v.reshape(cov.n_locations, cov.n_times)
    x = linalg.cho_solve((cov.chol_s, True), a)
    x = linalg.cho_solve((cov.chol_t, True), x.T).T
    return x.ravel()


def marginal_obs_cov(sigma_eps: KroneckerCov, sigma_e: KroneckerCov) -> KroneckerCov:
    """Covariance of the observation vector once the field is integrated out.

    ``sigma_eps`` is the field covariance ``Sigma_s (x) Sigma_t`` and ``sigma_e`` the
    observation error ``Sigma_s (x) Sigma_t'``. Both must share the spatial factor;
    the result is ``Sigma_s (x) (Sigma_t + Sigma_t')``.
    """
    a, b = sigma_eps.sigma_s, sigma_e.sigma_s
    if a.shape != b.shape or not np.allclose(a, b, rtol=1e-10, atol=1e-12 * np.abs(a).max()):
        raise ModelAssumptionError("field and observation covariances must share the spatial factor")
    if sigma_eps.n_times != sigma_e.n_times:
        raise ShapeError("temporal factors differ in dimension")
    return KroneckerCov(a, sigma_eps.sigma_t + sigma_e.sigma_t, sigma_eps.nugget_rel)


def conditional_mean(prior_mean, sigma_t, sigma_t_obs, z, sigma_s=None, locations=None,
                     nugget_rel=NUGGET_REL):
    """Expected field given a complete observation block.

    Parameters
    ----------
    prior_mean : (n_locations * n_times,) array
        Prior mean ``h(c)`` of the whole field.
    sigma_t, sigma_t_obs : (n_times, n_times) arrays
        Temporal factors of the field and observation-error covariances.
    z : array
        Complete (already imputed) observations. When ``locations`` is None it
        covers every location; otherwise it holds ``len(locations)`` series in
        the order given.
    sigma_s : array, optional
        Spatial factor. Only needed when ``locations`` is a strict subset, to
        carry the update to unobserved locations by spatial kriging weights.
    locations : sequence of int, optional
        Observed locations that ``z`` refers to.
    """
    sigma_t = np.asarray(sigma_t, dtype=float)
    n_times = sigma_t.shape[0]
    h = as_grid(prior_mean, n_times)
    z = np.asarray(z, dtype=float)
    if np.isnan(z).any():
        raise PreconditionError("observation vector has missing entries; impute first")
    if not np.all(np.isfinite(z)):
        raise DataError("non-finite observation value")
    zg = as_grid(z, n_times)
    if locations is None:
        if zg.shape != h.shape:
            raise ShapeError("z must cover every location when locations is None")
        locs = np.arange(h.shape[0])
    else:
        locs = np.asarray(locations, dtype=int)
        if zg.shape[0] != locs.size:
            raise ShapeError("z length does not match the number of locations")
    total = cholesky(sigma_t + np.asarray(sigma_t_obs, dtype=float), "sigma_t + sigma_t_obs",
                     nugget_rel)
    resid = zg - h[locs]
    # each row r -> sigma_t (sigma_t + sigma_t')^-1 r
    update = linalg.cho_solve((total, True), resid.T).T @ sigma_t
    out = h.copy()
    if locs.size == h.shape[0] and np.array_equal(np.sort(locs), np.arange(h.shape[0])):
        out[locs] += update
    else:
        if sigma_s is None:
            raise PreconditionError("sigma_s is required when only some locations are observed")
        sigma_s = np.asarray(sigma_s, dtype=float)
        ls = cholesky(sigma_s[np.ix_(locs, locs)], "sigma_s[observed]", nugget_rel)
        weights = linalg.cho_solve((ls, True), sigma_s[locs, :]).T
        out += weights @ update
        out[locs] = h[locs] + update
    return out.ravel()


def _block_cov(sigma_s, sigma_t, loc_a, time_a, loc_b, time_b):
    return sigma_s[np.ix_(loc_a, loc_b)] * sigma_t[np.ix_(time_a, time_b)]


def impute_missing(obs, prior_mean, marginal: KroneckerCov, mode="mean", seed=None,
                   locations=None):
    """Complete the observation block at every observed location.

    Missing time points at locations with at least one observation are filled
    from the Gaussian ``z | c ~ N(prior_mean, marginal)`` conditioned on the
    observed entries, either with the conditional mean (``mode="mean"``) or a
    seeded conditional draw (``mode="sample"``). Observed entries pass through
    unchanged.

    Returns the completed values as a vector of ``len(locations) * n_times``
    entries, location-major, for ``locations`` (default: ``obs.locations``).
    """
    if mode not in ("mean", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    n_times = obs.n_times
    if marginal.n_times != n_times:
        raise ShapeError("marginal temporal factor does not match observation times")
    locs = obs.locations if locations is None else np.asarray(locations, dtype=int)
    counts = np.bincount(obs.location, minlength=obs.n_locations)
    empty = [int(s) for s in locs if counts[s] == 0]
    if empty:
        raise PreconditionError(f"locations {empty} have no observations and must be excluded")
    if not np.all(np.isfinite(obs.value)):
        raise DataError("non-finite observation value")
    h = as_grid(prior_mean, n_times)
    if h.shape[0] != obs.n_locations:
        raise ShapeError("prior mean does not match the observation grid")
    if marginal.n_locations == obs.n_locations:
        sigma_s = marginal.sigma_s[np.ix_(locs, locs)]
    elif marginal.n_locations == locs.size:
        sigma_s = marginal.sigma_s
    else:
        raise ShapeError("marginal spatial factor matches neither the grid nor the observed locations")
    sigma_t = marginal.sigma_t

    grid = obs.grid(locs)
    hs = h[locs]
    out = grid.copy()
    miss = np.isnan(grid)
    if not miss.any():
        return out.ravel()
    li, ti = np.nonzero(~miss)
    lm, tm = np.nonzero(miss)
    k_oo = _block_cov(sigma_s, sigma_t, li, ti, li, ti)
    k_mo = _block_cov(sigma_s, sigma_t, lm, tm, li, ti)
    chol = cholesky(k_oo, "observed-entry covariance", marginal.nugget_rel)
    resid = grid[li, ti] - hs[li, ti]
    filled = hs[lm, tm] + k_mo @ linalg.cho_solve((chol, True), resid)
    if mode == "sample":
        k_mm = _block_cov(sigma_s, sigma_t, lm, tm, lm, tm)
        a = linalg.solve_triangular(chol, k_mo.T, lower=True)
        cond = k_mm - a.T @ a
        cond = 0.5 * (cond + cond.T)
        lc = cholesky(cond, "conditional covariance", marginal.nugget_rel)
        rng = np.random.default_rng(seed)
        filled = filled + lc @ rng.standard_normal(filled.size)
    out[lm, tm] = filled
    return out.ravel()


def save_matrix_csv(path, a):
    """Write a square matrix as row-major CSV with a ``dim,<n>`` header."""
    a = np.asarray(a, dtype=float)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dim", a.shape[0]])
        for row in a:
            w.writerow([repr(float(x)) for x in row])


def load_matrix_csv(path):
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"matrix file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "dim":
        raise DataError(f"{path}: expected 'dim,<n>' header")
    n = int(rows[0][1])
    a = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float)
    if a.shape != (n, n):
        raise ShapeError(f"{path}: header says {n}x{n}, body is {a.shape}")
    return a


def save_field_csv(path, v, n_times):
    g = as_grid(v, n_times)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["location", "time", "value"])
        for s in range(g.shape[0]):
            for t in range(n_times):
                w.writerow([s, t, repr(float(g[s, t]))])


def load_field_csv(path, n_locations, n_times):
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"field file not found: {path}")
    out = np.full((n_locations, n_times), np.nan)
    with path.open(newline="") as fh:
        for r in csv.DictReader(fh):
            out[int(r["location"]), int(r["time"])] = float(r["value"])
    if np.isnan(out).any():
        raise DataError(f"{path}: field has missing (location, time) entries")
    return out.ravel()
