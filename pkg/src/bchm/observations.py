"""Sparse spatio-temporal observations of a boundary field."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, MissingInputError, ShapeError


@dataclass(frozen=True)
class ObservationSet:
    """Observed entries of an ``n_locations`` x ``n_times`` field.

    Entries are stored as parallel arrays (location index, time index, value,
    error standard deviation). Unobserved entries are simply absent; the
    missingness mask is derived from what is present.

    ``dating_sd`` records age-model uncertainty per entry. It is carried as
    metadata only and never enters a covariance.
    """

    n_locations: int
    n_times: int
    location: np.ndarray
    time: np.ndarray
    value: np.ndarray
    error_sd: np.ndarray
    dating_sd: np.ndarray | None = None
    location_names: dict = field(default_factory=dict)

    def __post_init__(self):
        loc = np.asarray(self.location, dtype=int).ravel()
        tim = np.asarray(self.time, dtype=int).ravel()
        val = np.asarray(self.value, dtype=float).ravel()
        sd = np.asarray(self.error_sd, dtype=float).ravel()
        if not (loc.size == tim.size == val.size == sd.size):
            raise ShapeError("observation arrays must have equal length")
        if loc.size and (loc.min() < 0 or loc.max() >= self.n_locations):
            raise ShapeError("location index outside [0, n_locations)")
        if tim.size and (tim.min() < 0 or tim.max() >= self.n_times):
            raise ShapeError("time index outside [0, n_times)")
        if not np.all(np.isfinite(val)):
            raise DataError("non-finite observation value")
        if not np.all(np.isfinite(sd)) or np.any(sd < 0):
            raise DataError("error_sd must be finite and non-negative")
        flat = loc * self.n_times + tim
        if np.unique(flat).size != flat.size:
            raise DataError("duplicate (location, time) observation")
        order = np.argsort(flat, kind="stable")
        object.__setattr__(self, "location", loc[order])
        object.__setattr__(self, "time", tim[order])
        object.__setattr__(self, "value", val[order])
        object.__setattr__(self, "error_sd", sd[order])
        if self.dating_sd is not None:
            dsd = np.asarray(self.dating_sd, dtype=float).ravel()
            if dsd.size != loc.size:
                raise ShapeError("dating_sd length mismatch")
            object.__setattr__(self, "dating_sd", dsd[order])

    @classmethod
    def empty(cls, n_locations, n_times):
        z = np.zeros(0)
        return cls(n_locations, n_times, z.astype(int), z.astype(int), z, z)

    @classmethod
    def from_grid(cls, grid, error_sd, locations=None, n_locations=None):
        """Build from a (locations x times) array with NaN marking missing entries."""
        grid = np.atleast_2d(np.asarray(grid, dtype=float))
        sd = np.broadcast_to(np.asarray(error_sd, dtype=float), grid.shape)
        if locations is None:
            locations = np.arange(grid.shape[0])
        locations = np.asarray(locations, dtype=int)
        if n_locations is None:
            n_locations = int(locations.max()) + 1 if locations.size else 0
        rows, cols = np.nonzero(~np.isnan(grid))
        return cls(n_locations, grid.shape[1], locations[rows], cols,
                   grid[rows, cols], sd[rows, cols])

    def __len__(self):
        return int(self.value.size)

    @property
    def flat_index(self):
        """Position of each entry in the location-major field vector."""
        return self.location * self.n_times + self.time

    @property
    def locations(self):
        """Sorted locations that carry at least one observation."""
        return np.unique(self.location)

    @property
    def error_var(self):
        return self.error_sd ** 2

    def grid(self, locations=None):
        """Observed values as a (len(locations) x n_times) array, NaN where missing."""
        locs = self.locations if locations is None else np.asarray(locations, dtype=int)
        out = np.full((locs.size, self.n_times), np.nan)
        pos = {int(s): i for i, s in enumerate(locs)}
        for s, t, v in zip(self.location, self.time, self.value):
            i = pos.get(int(s))
            if i is not None:
                out[i, t] = v
        return out

    def error_grid(self, locations=None):
        locs = self.locations if locations is None else np.asarray(locations, dtype=int)
        out = np.full((locs.size, self.n_times), np.nan)
        pos = {int(s): i for i, s in enumerate(locs)}
        for s, t, v in zip(self.location, self.time, self.error_sd):
            i = pos.get(int(s))
            if i is not None:
                out[i, t] = v
        return out

    def mask(self, locations=None):
        return ~np.isnan(self.grid(locations))

    def subset(self, locations=None, times=None):
        keep = np.ones(len(self), dtype=bool)
        if locations is not None:
            keep &= np.isin(self.location, np.asarray(locations, dtype=int))
        if times is not None:
            keep &= np.isin(self.time, np.asarray(times, dtype=int))
        dsd = None if self.dating_sd is None else self.dating_sd[keep]
        return ObservationSet(self.n_locations, self.n_times, self.location[keep],
                              self.time[keep], self.value[keep], self.error_sd[keep],
                              dsd, dict(self.location_names))

    def per_time_error_var(self):
        """Pooled error variance for each time index (mean over observed entries).

        Times with no observation receive the mean over all entries.
        """
        if len(self) == 0:
            raise DataError("no observations to pool error variances from")
        var = self.error_var
        total = np.bincount(self.time, weights=var, minlength=self.n_times)
        count = np.bincount(self.time, minlength=self.n_times)
        out = np.full(self.n_times, var.mean())
        hit = count > 0
        out[hit] = total[hit] / count[hit]
        return out

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            head = ["location_id", "time_index", "value", "error_sd"]
            if self.dating_sd is not None:
                head.append("dating_sd")
            w.writerow(head)
            for i in range(len(self)):
                row = [int(self.location[i]), int(self.time[i]),
                       repr(float(self.value[i])), repr(float(self.error_sd[i]))]
                if self.dating_sd is not None:
                    row.append(repr(float(self.dating_sd[i])))
                w.writerow(row)

    @classmethod
    def from_csv(cls, path, n_locations, n_times):
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"observation file not found: {path}")
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        need = {"location_id", "time_index", "value", "error_sd"}
        if rows and not need <= set(rows[0]):
            raise DataError(f"{path}: header must contain {sorted(need)}")
        loc = [int(r["location_id"]) for r in rows]
        tim = [int(r["time_index"]) for r in rows]
        val = [float(r["value"]) for r in rows]
        sd = [float(r["error_sd"]) for r in rows]
        dsd = None
        if rows and "dating_sd" in rows[0]:
            dsd = [float(r["dating_sd"]) for r in rows]
        return cls(n_locations, n_times, np.array(loc, dtype=int), np.array(tim, dtype=int),
                   np.array(val), np.array(sd), None if dsd is None else np.array(dsd))


def block_average(series, factor, axis=-1):
    """Average consecutive blocks of ``factor`` samples along ``axis``.

    Used to turn raw (e.g. decadal) series into the coarser time steps the
    boundary model is fitted on. Trailing samples that do not fill a block
    are dropped.
    """
    a = np.moveaxis(np.asarray(series, dtype=float), axis, -1)
    n = a.shape[-1] // factor
    if n == 0:
        raise ShapeError(f"series shorter than one block of {factor}")
    out = a[..., : n * factor].reshape(*a.shape[:-1], n, factor).mean(axis=-1)
    return np.moveaxis(out, -1, axis)
