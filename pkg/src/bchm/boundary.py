"""Boundary-condition model: ensemble mean plus temporal and spatial basis vectors.

The boundary field is ``h(c) = mu + sum_j ct_j t_j + sum_j cs_j s_j`` on an
``n_locations x n_times`` grid (location-major vectors, see :mod:`bchm.kron`).
The time axis is split into periods; every basis vector is supported on one
period. Temporal vectors are lifted from a rotated basis fitted at a few anchor
locations; spatial vectors are time-constant patterns fitted to the residual
bias that remains after the temporal step.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .basis import (MIN_SIGNAL, Basis, CentredEnsemble, Weight, optimal_rotation,
                    project, provenance_hash, recon_error, svd_basis)
from .errors import (BoundsError, ConsistencyError, DataError, MissingInputError,
                     PreconditionError, RangeError, RankError, ShapeError)
from .kron import KroneckerCov, as_grid, conditional_mean, impute_missing, marginal_obs_cov
from .observations import ObservationSet


def squared_exponential(points, length_scale, variance=1.0, jitter=1e-6):
    """SE covariance over 1-d positions or an (n, d) array of coordinates."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    k = variance * np.exp(-0.5 * d2 / length_scale ** 2)
    return k + jitter * variance * np.eye(len(x))


def great_circle_distance(lonlat):
    """Pairwise great-circle distances (radians) between (lon, lat) degree pairs."""
    lon, lat = np.radians(np.asarray(lonlat, dtype=float)).T
    dlon = lon[:, None] - lon[None, :]
    c = np.sin(lat[:, None]) * np.sin(lat[None, :]) + np.cos(lat[:, None]) * np.cos(lat[None, :]) * np.cos(dlon)
    return np.arccos(np.clip(c, -1.0, 1.0))


def default_temporal_cov(n_times, length_scale=5.0, variance=1.0):
    return squared_exponential(np.arange(n_times), length_scale, variance)


def default_spatial_cov(coords, length_scale, variance=1.0, metric="euclidean"):
    if metric == "euclidean":
        return squared_exponential(coords, length_scale, variance)
    if metric == "great_circle":
        d = great_circle_distance(coords)
        return variance * np.exp(-0.5 * (d / length_scale) ** 2) + 1e-6 * variance * np.eye(len(d))
    raise ValueError(f"unknown metric {metric!r}")


def split_periods(n_times, n_periods=3):
    edges = np.linspace(0, n_times, n_periods + 1).round().astype(int)
    return tuple((int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]))


def _check_periods(periods, n_times):
    pos = 0
    for a, b in periods:
        if a != pos or b <= a:
            raise ShapeError(f"periods must partition [0, {n_times}) without gaps: {periods}")
        pos = b
    if pos != n_times:
        raise ShapeError(f"periods must partition [0, {n_times}) without gaps: {periods}")


def field_rows(locations, times, n_times):
    """Flat indices of the (location, time) block, location-major."""
    locs = np.asarray(locations, dtype=int)
    ts = np.asarray(times, dtype=int)
    return (locs[:, None] * n_times + ts[None, :]).ravel()


@dataclass(frozen=True, eq=False)
class TemporalFit:
    basis: Basis
    lift_matrix: np.ndarray
    anchor_locations: np.ndarray
    period: tuple
    ensemble_hash: str
    error_rotated: float
    error_truncated: float


@dataclass(frozen=True, eq=False)
class SpatialFit:
    patterns: np.ndarray
    vectors: np.ndarray
    period: tuple
    diagnostics: dict


@dataclass(frozen=True, eq=False)
class CoefficientSpace:
    """Names and prior box of the boundary coefficients."""

    names: tuple
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.size != len(self.names):
            raise ShapeError("bounds must match the coefficient names")
        if np.any(hi < lo):
            raise BoundsError("upper bound below lower bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "names", tuple(self.names))

    def check(self, c, soft=False):
        c = np.asarray(c, dtype=float)
        bad = np.flatnonzero((c < self.lower) | (c > self.upper))
        if bad.size:
            msg = "coefficients out of bounds: " + ", ".join(self.names[i] for i in bad)
            if soft:
                warnings.warn(msg, RuntimeWarning, stacklevel=3)
            else:
                raise BoundsError(msg)
        return c


@dataclass(frozen=True, eq=False)
class BoundaryModel:
    mu: np.ndarray
    n_locations: int
    n_times: int
    periods: tuple
    temporal: np.ndarray
    temporal_period: tuple
    spatial: np.ndarray
    spatial_period: tuple
    spatial_expert: tuple = ()
    lift_matrices: tuple = ()
    anchor_locations: tuple = ()
    ensemble_hash: str = ""
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_periods(self.periods, self.n_times)
        ell = self.n_locations * self.n_times
        mu = np.asarray(self.mu, dtype=float)
        if mu.shape != (ell,):
            raise ShapeError("mu does not match the grid")
        tv = np.asarray(self.temporal, dtype=float).reshape(-1, ell)
        sv = np.asarray(self.spatial, dtype=float).reshape(-1, ell)
        if len(self.temporal_period) != tv.shape[0] or len(self.spatial_period) != sv.shape[0]:
            raise ShapeError("period labels must match the vectors")
        expert = tuple(self.spatial_expert) or (False,) * sv.shape[0]
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "temporal", tv)
        object.__setattr__(self, "spatial", sv)
        object.__setattr__(self, "temporal_period", tuple(int(p) for p in self.temporal_period))
        object.__setattr__(self, "spatial_period", tuple(int(p) for p in self.spatial_period))
        object.__setattr__(self, "spatial_expert", tuple(bool(e) for e in expert))
        object.__setattr__(self, "periods", tuple((int(a), int(b)) for a, b in self.periods))

    @property
    def ell(self):
        return self.n_locations * self.n_times

    @property
    def n_temporal(self):
        return self.temporal.shape[0]

    @property
    def n_spatial(self):
        return self.spatial.shape[0]

    @property
    def n_coefficients(self):
        return self.n_temporal + self.n_spatial

    @property
    def vectors(self):
        """All basis vectors as an (ell x n_coefficients) matrix, temporal first."""
        return np.vstack([self.temporal, self.spatial]).T

    @property
    def coefficient_names(self):
        names, count = [], {}
        for p in self.temporal_period:
            count[p] = count.get(p, 0) + 1
            names.append(f"ct_{count[p]}_{p + 1}")
        count = {}
        for p in self.spatial_period:
            count[p] = count.get(p, 0) + 1
            names.append(f"cs_{count[p]}_{p + 1}")
        return tuple(names)


def _period_times(period, n_times):
    a, b = period
    if not 0 <= a < b <= n_times:
        raise RangeError(f"period {period} outside [0, {n_times})")
    return np.arange(a, b)


def _candidate_directions(full, n_keep, min_direction_var):
    """Drop SVD directions carrying less than ``min_direction_var`` of the variance."""
    if not min_direction_var:
        return full
    q = min(max(int(np.sum(full.variance_fraction() >= min_direction_var)), n_keep), full.q)
    return Basis(full.vectors[:, :q], full.singular_values[:q], np.eye(q),
                 full.member_weights[:, :q], full.weight_ref, full.source_hash, full.explained[:q])


def fit_temporal_basis(ens: CentredEnsemble, obs: ObservationSet, anchor_locations, w, n_t,
                       period=None, min_signal=MIN_SIGNAL, min_direction_var=None) -> TemporalFit:
    """Rotated temporal basis at the anchor locations for one period.

    ``obs`` must be complete at the anchors within the period (impute first).
    ``w`` is the observation-error weight on the anchor block, typically
    ``KroneckerCov(sigma_s[anchors][:, anchors], sigma_t_obs[period][:, period])``.
    ``min_direction_var`` excludes near-null SVD directions from the rotation;
    lifting them to the full field divides by their tiny singular values.
    """
    n_times = obs.n_times
    period = (0, n_times) if period is None else tuple(period)
    times = _period_times(period, n_times)
    anchors = np.asarray(anchor_locations, dtype=int)
    if ens.ell != obs.n_locations * n_times:
        raise ShapeError("ensemble length does not match the observation grid")
    if n_t >= ens.n:
        raise RankError(f"n_t={n_t} must be below the ensemble size {ens.n}")
    counts = np.bincount(obs.location, minlength=obs.n_locations)
    if anchors.size == 0 or np.any(counts[anchors] == 0):
        raise DataError("every anchor location needs observations")
    grid = obs.grid(anchors)[:, times]
    if np.isnan(grid).any():
        raise PreconditionError("anchor observations are incomplete in this period; impute first")
    rows = field_rows(anchors, times, n_times)
    sub = CentredEnsemble(ens.data[rows], ens.mean[rows], ens.member_ids)
    full = svd_basis(sub)
    if n_t > full.q:
        raise RankError(f"n_t={n_t} exceeds the rank {full.q} of the anchor ensemble")
    target = grid.ravel() - ens.mean[rows]
    rot = optimal_rotation(_candidate_directions(full, n_t, min_direction_var), w, target, n_t,
                           min_signal)
    wt = Weight(w, rows.size)
    return TemporalFit(rot, rot.member_weights, anchors, period, ens.hash,
                       recon_error(rot, wt, target), recon_error(full.truncate(n_t), wt, target))


def lift_temporal(ens: CentredEnsemble, fit: TemporalFit, n_times):
    """Full-field temporal vectors ``T_mu @ lift_matrix``, zero outside the period."""
    if ens.hash != fit.ensemble_hash:
        raise ConsistencyError("lift matrix was fitted on a different ensemble")
    vecs = (ens.data @ fit.lift_matrix).T
    keep = np.zeros(n_times, dtype=bool)
    keep[fit.period[0]:fit.period[1]] = True
    mask = np.tile(keep, ens.ell // n_times)
    return vecs * mask


def _time_average_residuals(ens, obs, temporal_vectors, times):
    n_times = obs.n_times
    ls = obs.n_locations
    all_locs = np.arange(ls)
    rows = field_rows(all_locs, times, n_times)
    d = ens.data[rows]
    tv = np.atleast_2d(temporal_vectors)[:, rows].T
    if tv.shape[1]:
        coef, *_ = np.linalg.lstsq(tv, d, rcond=None)
        eps_t = d - tv @ coef
    else:
        eps_t = d
    eps_t_bar = eps_t.reshape(ls, times.size, ens.n).mean(axis=1)

    in_period = np.isin(obs.time, times)
    loc, tim = obs.location[in_period], obs.time[in_period]
    y = obs.value[in_period] - ens.mean[loc * n_times + tim]
    var = obs.error_var[in_period]
    var = np.where(var > 0, var, np.min(var[var > 0]) if np.any(var > 0) else 1.0)
    if tv.shape[1] and y.size:
        x = np.atleast_2d(temporal_vectors)[:, loc * n_times + tim].T
        sw = 1.0 / np.sqrt(var)
        c_z, *_ = np.linalg.lstsq(x * sw[:, None], y * sw, rcond=None)
        eps_z = y - x @ c_z
    else:
        eps_z = y
    total = np.bincount(loc, weights=eps_z, minlength=ls)
    count = np.bincount(loc, minlength=ls)
    eps_z_bar = np.full(ls, np.nan)
    eps_z_bar[count > 0] = total[count > 0] / count[count > 0]
    return eps_t, eps_t_bar, eps_z_bar


def fit_spatial_basis(ens: CentredEnsemble, obs: ObservationSet, temporal_vectors, fit_locations,
                      holdout_locations, w, n_s, period=None, min_signal=MIN_SIGNAL,
                      min_direction_var=None) -> SpatialFit:
    """Time-constant spatial corrections for one period.

    Residuals of the ensemble and of the observations after removing the
    temporal vectors are averaged over the period; the SVD basis of the
    ensemble residuals is rotated towards the observation residual at
    ``fit_locations`` (weight ``w`` on those locations). ``holdout_locations``
    are used only for the reported diagnostic.
    """
    n_times = obs.n_times
    period = (0, n_times) if period is None else tuple(period)
    times = _period_times(period, n_times)
    fit_locs = np.asarray(fit_locations, dtype=int)
    hold = np.asarray(holdout_locations, dtype=int)
    if np.intersect1d(fit_locs, hold).size:
        raise PreconditionError("fit and holdout locations must be disjoint")
    _, eps_t_bar, eps_z_bar = _time_average_residuals(ens, obs, temporal_vectors, times)
    if np.isnan(eps_z_bar[fit_locs]).any() or (hold.size and np.isnan(eps_z_bar[hold]).any()):
        raise DataError("fit/holdout locations need observations in the period")
    resid_ens = CentredEnsemble(eps_t_bar - eps_t_bar.mean(axis=1, keepdims=True),
                                np.zeros(obs.n_locations), ens.member_ids)
    full = svd_basis(resid_ens)
    if n_s > full.q:
        raise RankError(f"n_s={n_s} exceeds the residual rank {full.q}")
    target = eps_z_bar[fit_locs]
    rot = optimal_rotation(_candidate_directions(full, n_s, min_direction_var), w, target, n_s,
                           min_signal, rows=fit_locs)
    patterns = rot.vectors.T
    vectors = np.zeros((n_s, obs.n_locations, n_times))
    vectors[:, :, times] = patterns[:, :, None]
    wt = Weight(w, fit_locs.size)
    diag = {
        "fit_error": recon_error(patterns[:, fit_locs].T, wt, target),
        "fit_baseline": float(target @ wt.solve(target)),
    }
    if hold.size:
        coef = project(patterns[:, fit_locs].T, wt, target)
        pred = patterns[:, hold].T @ coef
        diag["holdout_error"] = float(np.sum((eps_z_bar[hold] - pred) ** 2))
        diag["holdout_baseline"] = float(np.sum(eps_z_bar[hold] ** 2))
    return SpatialFit(patterns, vectors.reshape(n_s, -1), period, diag)


def append_expert_vector(model: BoundaryModel, pattern, period) -> BoundaryModel:
    """Add a hand-specified time-constant spatial pattern to one period."""
    pattern = np.asarray(pattern, dtype=float).ravel()
    if pattern.size != model.n_locations:
        raise ShapeError(f"pattern has {pattern.size} entries, grid has {model.n_locations} locations")
    if not 0 <= period < len(model.periods):
        raise RangeError(f"no period {period}")
    a, b = model.periods[period]
    v = np.zeros((model.n_locations, model.n_times))
    v[:, a:b] = pattern[:, None]
    # keep spatial vectors grouped by period so names stay ordered
    pos = sum(1 for p in model.spatial_period if p <= period)
    spatial = np.insert(model.spatial, pos, v.ravel(), axis=0)
    labels = list(model.spatial_period)
    labels.insert(pos, period)
    expert = list(model.spatial_expert)
    expert.insert(pos, True)
    return replace(model, spatial=spatial, spatial_period=tuple(labels), spatial_expert=tuple(expert))


def mean_function(model: BoundaryModel, c, space: CoefficientSpace | None = None, soft=False):
    """``h(c)``; ``c`` may be one coefficient vector or an (m x k) batch."""
    c = np.asarray(c, dtype=float)
    if c.shape[-1] != model.n_coefficients:
        raise ShapeError(f"expected {model.n_coefficients} coefficients, got {c.shape[-1]}")
    if space is not None:
        for row in np.atleast_2d(c):
            space.check(row, soft=soft)
    return model.mu + c @ model.vectors.T


def generate_boundary(model: BoundaryModel, c, obs: ObservationSet, sigma_s, sigma_t, sigma_t_obs,
                      mode="mean", seed=None, space: CoefficientSpace | None = None):
    """Boundary field at ``c`` conditioned on the sparse observations.

    Missing entries at observed locations are completed from ``z | c`` (mean or
    seeded draw), then the field expectation given the completed block is
    returned. Without observations this is ``h(c)``.
    """
    h = mean_function(model, c, space)
    if obs is None or len(obs) == 0:
        return h
    sigma_s = np.asarray(sigma_s, dtype=float)
    field_cov = KroneckerCov(sigma_s, sigma_t)
    err_cov = KroneckerCov(sigma_s, sigma_t_obs)
    locs = obs.locations
    marginal = marginal_obs_cov(field_cov, err_cov).restrict(locs)
    z = impute_missing(obs, h, marginal, mode=mode, seed=seed)
    return conditional_mean(h, field_cov.sigma_t, err_cov.sigma_t, z, sigma_s=sigma_s,
                            locations=locs)


def smooth_transition(field, n_times, window=7, time_range=None):
    """Centred moving average over time for the slices in ``time_range``.

    ``time_range`` is a half-open (start, stop) pair of time indices. Averages
    use the unsmoothed input, so the result does not depend on slice order.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    g = as_grid(field, n_times)
    if time_range is None:
        time_range = (0, n_times)
    start, stop = time_range
    half = window // 2
    if start - half < 0 or stop + half > n_times or stop <= start:
        raise RangeError(f"window {window} around {time_range} leaves the time axis [0, {n_times})")
    out = g.copy()
    for t in range(start, stop):
        out[:, t] = g[:, t - half:t + half + 1].sum(axis=1) / window
    return out.ravel()


def transition_range(model: BoundaryModel, boundary_index=None, window=7):
    """Slices smoothed around the start of a period (default: the last one)."""
    if boundary_index is None:
        boundary_index = len(model.periods) - 1
    b = model.periods[boundary_index][0]
    half = (window - 1) // 2
    return (b - half, b + half)


def monthly_temporal_vectors(model: BoundaryModel, monthly_ensemble):
    """Monthly versions of the temporal vectors from a per-month centred ensemble.

    ``monthly_ensemble`` has shape (12, ell, n); month ``m`` holds the members
    centred by the month-``m`` ensemble mean.
    """
    me = np.asarray(monthly_ensemble, dtype=float)
    out = np.zeros((me.shape[0], model.n_temporal, model.ell))
    keep = {}
    for i, (a, b) in enumerate(model.periods):
        k = np.zeros(model.n_times, dtype=bool)
        k[a:b] = True
        keep[i] = np.tile(k, model.n_locations)
    start = 0
    for p, lift in enumerate(model.lift_matrices):
        k = lift.shape[1]
        for m in range(me.shape[0]):
            out[m, start:start + k] = (me[m] @ lift).T * keep[p]
        start += k
    return out


def monthly_disaggregate(model: BoundaryModel, monthly_means, monthly_temporal, c, atol=1e-8):
    """Monthly boundary fields whose average over months is ``h(c)``.

    ``monthly_means`` is (n_months, ell); ``monthly_temporal`` is
    (n_months, n_temporal, ell). Spatial vectors are shared by all months.
    """
    mm = np.asarray(monthly_means, dtype=float)
    mt = np.asarray(monthly_temporal, dtype=float)
    if mm.ndim != 2 or mm.shape[1] != model.ell or mt.shape != (mm.shape[0], model.n_temporal, model.ell):
        raise ShapeError("monthly components do not match the model")
    scale = max(1.0, np.abs(model.mu).max())
    if np.abs(mm.mean(axis=0) - model.mu).max() > atol * scale:
        raise ConsistencyError("monthly means do not average to the model mean")
    if model.n_temporal and np.abs(mt.mean(axis=0) - model.temporal).max() > atol * max(1.0, np.abs(model.temporal).max()):
        raise ConsistencyError("monthly temporal vectors do not average to the model vectors")
    c = np.asarray(c, dtype=float)
    ct, cs = c[: model.n_temporal], c[model.n_temporal:]
    spatial = cs @ model.spatial if model.n_spatial else 0.0
    return mm + np.einsum("j,mjl->ml", ct, mt) + spatial


def fit_temporal_model(ens: CentredEnsemble, obs: ObservationSet, sigma_s, sigma_t, sigma_t_obs,
                       periods, anchor_locations, n_t=2, min_signal=MIN_SIGNAL,
                       min_direction_var=1e-4) -> BoundaryModel:
    """Boundary model with the temporal vectors of every period and no spatial vectors.

    Anchor series are completed by conditional-mean imputation under the
    prior ``h(0) = mu`` before the temporal rotation.
    """
    n_times = obs.n_times
    periods = tuple(tuple(p) for p in periods)
    _check_periods(periods, n_times)
    sigma_s = np.asarray(sigma_s, dtype=float)
    sigma_t_obs = np.asarray(sigma_t_obs, dtype=float)
    anchors = np.asarray(anchor_locations, dtype=int)
    counts = np.bincount(obs.location, minlength=obs.n_locations)
    if anchors.size == 0 or np.any(counts[anchors] == 0):
        raise DataError("every anchor location needs observations")
    marginal = KroneckerCov(sigma_s[np.ix_(anchors, anchors)], np.asarray(sigma_t) + sigma_t_obs)
    filled = impute_missing(obs, ens.mean, marginal, locations=anchors).reshape(anchors.size, n_times)
    pooled = np.sqrt(obs.per_time_error_var())
    completed = ObservationSet.from_grid(filled, np.broadcast_to(pooled, filled.shape), anchors,
                                         obs.n_locations)
    temporal, t_labels, lifts, diag = [], [], [], []
    for p, period in enumerate(periods):
        times = np.arange(*period)
        w_t = KroneckerCov(sigma_s[np.ix_(anchors, anchors)], sigma_t_obs[np.ix_(times, times)])
        tfit = fit_temporal_basis(ens, completed, anchors, w_t, n_t, period, min_signal,
                                  min_direction_var)
        temporal.extend(lift_temporal(ens, tfit, n_times))
        t_labels.extend([p] * n_t)
        lifts.append(tfit.lift_matrix)
        diag.append({"period": p, "error_rotated": tfit.error_rotated,
                     "error_truncated": tfit.error_truncated})
    ell = ens.ell
    return BoundaryModel(ens.mean, obs.n_locations, n_times, periods,
                         np.array(temporal).reshape(-1, ell), t_labels, np.zeros((0, ell)), (),
                         (), tuple(lifts), tuple(int(a) for a in anchors), ens.hash,
                         {"temporal": diag, "spatial": []})


def add_spatial_vectors(model: BoundaryModel, ens: CentredEnsemble, obs: ObservationSet, sigma_s,
                        n_s=2, fit_locations=None, holdout_locations=(), min_signal=MIN_SIGNAL,
                        min_direction_var=1e-4, expert_vectors=()) -> BoundaryModel:
    """Fit spatial vectors for every period on top of the model's temporal vectors.

    ``expert_vectors`` is a sequence of ``(pattern, period_index)`` pairs
    appended at the end.
    """
    if ens.hash != model.ensemble_hash:
        raise ConsistencyError("temporal vectors were fitted on a different ensemble")
    sigma_s = np.asarray(sigma_s, dtype=float)
    n_times = model.n_times
    if fit_locations is None:
        fit_locations = np.setdiff1d(obs.locations, np.asarray(holdout_locations, dtype=int))
    fit_locations = np.asarray(fit_locations, dtype=int)
    holdout_locations = np.asarray(holdout_locations, dtype=int)
    spatial, s_labels, diag = [], [], []
    for p, period in enumerate(model.periods):
        times = np.arange(*period)
        tv = model.temporal[np.array(model.temporal_period) == p]
        seen = np.unique(obs.location[np.isin(obs.time, times)])
        fl = np.intersect1d(fit_locations, seen)
        hl = np.intersect1d(holdout_locations, seen)
        if n_s:
            sfit = fit_spatial_basis(ens, obs, tv, fl, hl, sigma_s[np.ix_(fl, fl)], n_s, period,
                                     min_signal, min_direction_var)
            spatial.extend(sfit.vectors)
            s_labels.extend([p] * n_s)
            diag.append({"period": p, **sfit.diagnostics})
    diagnostics = {"temporal": list(model.diagnostics.get("temporal", [])), "spatial": diag}
    out = replace(model, spatial=np.array(spatial).reshape(-1, model.ell),
                  spatial_period=tuple(s_labels), spatial_expert=(False,) * len(s_labels),
                  diagnostics=diagnostics)
    for pattern, period in expert_vectors:
        out = append_expert_vector(out, pattern, period)
    return out


def fit_boundary_model(ens: CentredEnsemble, obs: ObservationSet, sigma_s, sigma_t, sigma_t_obs,
                       periods, anchor_locations, n_t=2, n_s=2, fit_locations=None,
                       holdout_locations=(), min_signal=MIN_SIGNAL, expert_vectors=(),
                       min_direction_var=1e-4):
    """Fit temporal then spatial vectors for every period."""
    model = fit_temporal_model(ens, obs, sigma_s, sigma_t, sigma_t_obs, periods,
                               anchor_locations, n_t, min_signal, min_direction_var)
    return add_spatial_vectors(model, ens, obs, sigma_s, n_s, fit_locations, holdout_locations,
                               min_signal, min_direction_var, expert_vectors)


def save_model(model: BoundaryModel, directory):
    """JSON manifest plus CSV matrices; byte-stable for equal models."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)

    def dump(name, rows):
        with (d / name).open("w", newline="") as fh:
            w = csv.writer(fh)
            for r in np.atleast_2d(rows):
                w.writerow([repr(float(x)) for x in r])

    dump("mu.csv", model.mu[None, :])
    dump("temporal.csv", model.temporal if model.n_temporal else np.zeros((0, model.ell)))
    dump("spatial.csv", model.spatial if model.n_spatial else np.zeros((0, model.ell)))
    for i, lift in enumerate(model.lift_matrices):
        dump(f"lift_{i}.csv", lift)
    manifest = {
        "n_locations": model.n_locations,
        "n_times": model.n_times,
        "periods": [list(p) for p in model.periods],
        "temporal_period": list(model.temporal_period),
        "spatial_period": list(model.spatial_period),
        "spatial_expert": list(model.spatial_expert),
        "coefficient_names": list(model.coefficient_names),
        "anchor_locations": [int(a) for a in model.anchor_locations],
        "ensemble_hash": model.ensemble_hash,
        "n_lift": len(model.lift_matrices),
        "content_hash": provenance_hash(model.mu, model.temporal, model.spatial),
        "diagnostics": _jsonable(model.diagnostics),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d / "manifest.json"


def load_model(directory) -> BoundaryModel:
    d = Path(directory)
    if not (d / "manifest.json").exists():
        raise MissingInputError(f"model manifest not found: {d / 'manifest.json'}")
    man = json.loads((d / "manifest.json").read_text())
    ell = man["n_locations"] * man["n_times"]

    def load(name):
        with (d / name).open(newline="") as fh:
            rows = [[float(x) for x in r] for r in csv.reader(fh) if r]
        return np.array(rows, dtype=float)

    tv = load("temporal.csv").reshape(-1, ell)
    sv = load("spatial.csv").reshape(-1, ell)
    lifts = tuple(load(f"lift_{i}.csv") for i in range(man["n_lift"]))
    model = BoundaryModel(load("mu.csv").ravel(), man["n_locations"], man["n_times"],
                          tuple(tuple(p) for p in man["periods"]), tv, man["temporal_period"],
                          sv, man["spatial_period"], man["spatial_expert"], lifts,
                          tuple(man["anchor_locations"]), man["ensemble_hash"], man["diagnostics"])
    if provenance_hash(model.mu, model.temporal, model.spatial) != man["content_hash"]:
        raise ConsistencyError(f"{d}: model files do not match the manifest hash")
    return model


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    return obj
