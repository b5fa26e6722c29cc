"""Low-dimensional bases for ensembles of vectorized fields.

Covers the centred SVD basis, weighted projection and reconstruction, the
weighted reconstruction error of a target, and rotation of the SVD basis
towards a target under a minimum ensemble-signal constraint.

Weight matrices ``w`` may be ``None`` (identity), a 1-d array of variances
(diagonal), a dense positive definite matrix, or a :class:`~bchm.kron.KroneckerCov`.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, optimize

from .errors import (ConsistencyError, ConstraintError, MissingInputError,
                     PreconditionError, RankError, ShapeError)
from .kron import KroneckerCov, cholesky, kron_inverse_apply

MIN_SIGNAL = 0.001


def provenance_hash(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype=float))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


class Weight:
    """Uniform ``W^-1`` application for the supported weight representations."""

    def __init__(self, w, dim):
        self.dim = dim
        self.kind = "identity"
        if w is None:
            return
        if isinstance(w, Weight):
            self.__dict__.update(w.__dict__)
            return
        if isinstance(w, KroneckerCov):
            if w.dim != dim:
                raise ShapeError(f"weight dimension {w.dim} != {dim}")
            self.kind, self.kron = "kron", w
            return
        w = np.asarray(w, dtype=float)
        if w.ndim == 1:
            if w.size != dim:
                raise ShapeError(f"weight length {w.size} != {dim}")
            if np.any(w <= 0):
                raise PreconditionError("diagonal weights must be positive")
            self.kind, self.diag = "diag", w
        else:
            if w.shape != (dim, dim):
                raise ShapeError(f"weight shape {w.shape} != ({dim}, {dim})")
            self.kind, self.chol = "dense", cholesky(w, "W")

    def solve(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "identity":
            return x
        if self.kind == "diag":
            return x / (self.diag if x.ndim == 1 else self.diag[:, None])
        if self.kind == "kron":
            return kron_inverse_apply(self.kron, x)
        return linalg.cho_solve((self.chol, True), x)


@dataclass(frozen=True, eq=False)
class CentredEnsemble:
    """An ensemble of ``n`` vectorized fields stored as deviations from its mean."""

    data: np.ndarray
    mean: np.ndarray
    member_ids: tuple = ()

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        mean = np.asarray(self.mean, dtype=float).ravel()
        if data.ndim != 2 or data.shape[0] != mean.size:
            raise ShapeError("data must be (len(mean), n)")
        if data.shape[1] < 2:
            raise ShapeError(f"ensemble needs at least 2 members, got {data.shape[1]}")
        scale = max(np.linalg.norm(mean), np.abs(data).max(), 1.0)
        if np.abs(data.sum(axis=1)).max() > 1e-8 * scale:
            raise PreconditionError("ensemble data are not centred")
        ids = tuple(self.member_ids) or tuple(f"m{i}" for i in range(data.shape[1]))
        if len(ids) != data.shape[1]:
            raise ShapeError("member_ids length mismatch")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "member_ids", ids)

    @classmethod
    def from_runs(cls, runs, member_ids=()):
        """Centre an (ell x n) matrix of raw runs by its row mean."""
        runs = np.asarray(runs, dtype=float)
        mu = runs.mean(axis=1)
        return cls(runs - mu[:, None], mu, member_ids)

    @property
    def n(self):
        return self.data.shape[1]

    @property
    def ell(self):
        return self.data.shape[0]

    @property
    def hash(self):
        return provenance_hash(self.data, self.mean)

    def restrict(self, rows):
        rows = np.asarray(rows)
        sub = self.data[rows]
        return CentredEnsemble(sub - sub.mean(axis=1, keepdims=True), self.mean[rows], self.member_ids)


@dataclass(frozen=True, eq=False)
class Basis:
    """Basis vectors plus the recipe that built them.

    ``rotation`` maps SVD coefficients to these vectors (``vectors = Gamma @ rotation``)
    and ``member_weights`` writes each vector as a combination of centred
    ensemble members (``vectors = ensemble.data @ member_weights``).
    """

    vectors: np.ndarray
    singular_values: np.ndarray
    rotation: np.ndarray
    member_weights: np.ndarray
    weight_ref: str = "identity"
    source_hash: str = ""
    explained: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def q(self):
        return self.vectors.shape[1]

    @property
    def ell(self):
        return self.vectors.shape[0]

    def truncate(self, q):
        if not 1 <= q <= self.q:
            raise RankError(f"cannot truncate a rank-{self.q} basis to {q}")
        return Basis(self.vectors[:, :q], self.singular_values, self.rotation[:, :q],
                     self.member_weights[:, :q], self.weight_ref, self.source_hash,
                     self.explained[:q])

    def variance_fraction(self):
        s2 = self.singular_values ** 2
        return s2 / s2.sum()


def _sign_fix(gamma, u):
    idx = np.argmax(np.abs(gamma), axis=0)
    signs = np.sign(gamma[idx, np.arange(gamma.shape[1])])
    signs[signs == 0] = 1.0
    return gamma * signs, u * signs


def svd_basis(ens: CentredEnsemble, rtol=1e-10) -> Basis:
    """Right singular vectors of the centred ensemble, by descending singular value.

    Only directions with non-negligible singular value (relative ``rtol``) are
    kept, so a centred ensemble of ``n`` members yields at most ``n - 1``.
    """
    gamma, s, ut = linalg.svd(ens.data, full_matrices=False)
    r = int(np.sum(s > rtol * max(s[0], np.finfo(float).tiny))) if s.size else 0
    if r == 0:
        raise RankError("ensemble has no variability")
    gamma, u = _sign_fix(gamma[:, :r], ut[:r].T)
    weights = u / s[:r]
    frac = s[:r] ** 2 / np.sum(s ** 2)
    return Basis(gamma, s, np.eye(r), weights, "identity", ens.hash, frac)


def n_for_fraction(basis: Basis, fraction=0.95):
    """Smallest number of leading SVD vectors explaining ``fraction`` of the variance."""
    cum = np.cumsum(basis.variance_fraction())
    return int(min(np.searchsorted(cum, fraction - 1e-12) + 1, basis.q))


def _vectors(b):
    return b.vectors if isinstance(b, Basis) else np.atleast_2d(np.asarray(b, dtype=float).T).T


def project(basis, w, field, mean=None):
    """Weighted least-squares coefficients of ``field - mean`` on the basis.

    ``field`` may be a vector or an (ell x k) matrix of fields.
    """
    g = _vectors(basis)
    f = np.asarray(field, dtype=float)
    if f.shape[0] != g.shape[0]:
        raise ShapeError(f"field length {f.shape[0]} != basis length {g.shape[0]}")
    if mean is not None:
        mean = np.asarray(mean, dtype=float)
        f = f - (mean if f.ndim == 1 else mean[:, None])
    wt = Weight(w, g.shape[0])
    wg = wt.solve(g)
    gram = g.T @ wg
    try:
        c, low = linalg.cho_factor(gram)
    except linalg.LinAlgError as exc:
        raise RankError("basis is rank deficient under W") from exc
    if np.linalg.cond(gram) > 1e12:
        raise RankError("basis is rank deficient under W")
    return linalg.cho_solve((c, low), wg.T @ f)


def reconstruct(basis, coeffs, mean=None):
    g = _vectors(basis)
    c = np.asarray(coeffs, dtype=float)
    if c.shape[0] != g.shape[1]:
        raise ShapeError(f"{c.shape[0]} coefficients for a rank-{g.shape[1]} basis")
    out = g @ c
    if mean is not None:
        mean = np.asarray(mean, dtype=float)
        out = out + (mean if out.ndim == 1 else mean[:, None])
    return out


def recon_error(b, w, z):
    """Weighted reconstruction error ``(z - r(z))^T W^-1 (z - r(z))``."""
    g = _vectors(b)
    z = np.asarray(z, dtype=float)
    if z.shape[0] != g.shape[0]:
        raise ShapeError(f"target length {z.shape[0]} != basis length {g.shape[0]}")
    wt = Weight(w, g.shape[0])
    c = project(g, wt, z)
    e = z - g @ c
    return max(float(e @ wt.solve(e)), 0.0)


class _RotationProblem:
    """Rotation objective expressed in SVD-coefficient space.

    A candidate vector is ``Gamma @ a``; only rows ``rows`` enter the error.
    """

    def __init__(self, full, wt, z, rows):
        gr = full.vectors if rows is None else full.vectors[rows]
        wg = wt.solve(gr)
        self.m = gr.T @ wg
        self.b = wg.T @ z
        self.zz = float(z @ wt.solve(z))
        s2 = full.singular_values[: full.q] ** 2
        self.s2 = s2
        self.total = float(np.sum(full.singular_values ** 2))
        self.r = full.q

    def error(self, a):
        if a.shape[1] == 0:
            return self.zz
        gram = a.T @ self.m @ a
        ab = a.T @ self.b
        return max(self.zz - float(ab @ np.linalg.pinv(gram, rcond=1e-12) @ ab), 0.0)

    def orth(self, a, acc):
        if acc.shape[1] == 0:
            return a
        gram = acc.T @ self.m @ acc
        return a - acc @ (np.linalg.pinv(gram, rcond=1e-12) @ (acc.T @ self.m @ a))

    def signal(self, a):
        nrm = float(a @ a)
        if nrm == 0:
            return 0.0
        return float(self.s2 @ a ** 2) / (nrm * self.total)


def _best_direction(p: _RotationProblem, acc, min_signal):
    """Next rotated direction: closed form, then constrained search if needed."""
    if acc.shape[1]:
        gram = acc.T @ p.m @ acc
        c_acc = np.linalg.pinv(gram, rcond=1e-12) @ (acc.T @ p.b)
        g = p.b - p.m @ acc @ c_acc
    else:
        g = p.b.copy()

    def err_with(a):
        return p.error(np.column_stack([acc, a]))

    cands = []
    a_star = np.linalg.pinv(p.m, rcond=1e-12) @ g
    if np.linalg.norm(a_star) > 0:
        a_star = p.orth(a_star, acc)
    if np.linalg.norm(a_star) > 1e-14:
        a_star = a_star / np.linalg.norm(a_star)
        if p.signal(a_star) >= min_signal:
            return a_star
        cands.append(a_star)

    feasible = []
    for j in range(p.r):
        e = p.orth(np.eye(p.r)[:, j], acc)
        nrm = np.linalg.norm(e)
        if nrm < 1e-12:
            continue
        e = e / nrm
        if p.signal(e) >= min_signal:
            feasible.append(e)
    best, best_err = None, np.inf
    for e in feasible:
        if best is None or err_with(e) < best_err - 1e-15:
            best, best_err = e, err_with(e)
        for a0 in cands:
            for lam in np.linspace(0.0, 1.0, 201):
                a = p.orth((1 - lam) * a0 + lam * e, acc)
                nrm = np.linalg.norm(a)
                if nrm < 1e-12:
                    continue
                a = a / nrm
                if p.signal(a) >= min_signal:
                    err = err_with(a)
                    if err < best_err - 1e-15:
                        best, best_err = a, err
                    break
    if best is None:
        attainable = max((p.signal(p.orth(np.eye(p.r)[:, j], acc)) for j in range(p.r)),
                         default=0.0)
        raise ConstraintError(
            f"no direction explains min_signal={min_signal:g} of the ensemble variance "
            f"(max attainable {attainable:.6g})", max_attainable=attainable)

    def fun(a):
        a = p.orth(a, acc)
        nrm = float(a @ p.m @ a)
        if nrm <= 1e-300:
            return 0.0
        return -float(a @ g) ** 2 / nrm / max(p.zz, 1e-300)

    cons = {"type": "ineq", "fun": lambda a: p.signal(p.orth(a, acc)) - min_signal}
    res = optimize.minimize(fun, best, method="SLSQP", constraints=[cons],
                            options={"maxiter": 200, "ftol": 1e-14})
    if res.x is not None and np.all(np.isfinite(res.x)):
        a = p.orth(res.x, acc)
        nrm = np.linalg.norm(a)
        if nrm > 1e-12:
            a = a / nrm
            if p.signal(a) >= min_signal and err_with(a) < best_err:
                best = a
    return best


def optimal_rotation(full: Basis, w, z, n_keep, min_signal=MIN_SIGNAL, rows=None,
                     weight_ref=None) -> Basis:
    """Rotate an SVD basis so its leading vectors reconstruct ``z`` well.

    Vectors are chosen greedily: each is the combination of SVD directions that
    most reduces the weighted reconstruction error of ``z`` given the vectors
    already accepted, subject to explaining at least ``min_signal`` of the total
    ensemble variance, and is W-orthogonalized against them. If the greedy
    result is worse than the truncated SVD basis at equal rank, the truncated
    basis is returned instead.

    ``rows`` restricts the error to a subset of entries (``w`` and ``z`` are then
    given on those rows only) while the rotation applies to full vectors.
    """
    if not np.allclose(full.rotation, np.eye(full.q)):
        raise PreconditionError("optimal_rotation expects an unrotated SVD basis")
    if not 1 <= n_keep <= full.q:
        raise RankError(f"n_keep={n_keep} outside [1, {full.q}]")
    if not 0 < min_signal <= 1:
        raise ConstraintError(f"min_signal must lie in (0, 1], got {min_signal}")
    z = np.asarray(z, dtype=float)
    ell = full.ell if rows is None else len(np.arange(full.ell)[rows])
    if z.shape != (ell,):
        raise ShapeError(f"target length {z.shape} != ({ell},)")
    wt = Weight(w, ell)
    p = _RotationProblem(full, wt, z, rows)

    top = float(p.s2.max() / p.total)
    if min_signal > top + 1e-15:
        raise ConstraintError(
            f"min_signal={min_signal:g} exceeds the largest single-direction signal {top:.6g}",
            max_attainable=top)

    acc = np.zeros((p.r, 0))
    for _ in range(n_keep):
        a = _best_direction(p, acc, min_signal)
        acc = np.column_stack([acc, a])

    svd_a = np.eye(p.r)[:, :n_keep]
    if p.error(acc) > p.error(svd_a) + 1e-12 * max(p.zz, 1.0):
        acc = np.zeros((p.r, 0))
        for j in range(n_keep):
            acc = np.column_stack([acc, p.orth(svd_a[:, j], acc)])

    norms = np.linalg.norm(acc, axis=0)
    acc = acc / norms
    vectors = full.vectors @ acc
    ref = weight_ref if weight_ref is not None else wt.kind
    explained = np.array([p.signal(acc[:, j]) for j in range(acc.shape[1])])
    return Basis(vectors, full.singular_values, acc, full.member_weights @ acc, ref,
                 full.source_hash, explained)


def save_basis(basis: Basis, stem):
    """Write ``<stem>.csv`` (vectors) and ``<stem>.json`` (recipe sidecar)."""
    stem = Path(stem)
    with stem.with_suffix(".csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"v{j}" for j in range(basis.q)])
        for row in basis.vectors:
            w.writerow([repr(float(x)) for x in row])
    meta = {
        "singular_values": [float(x) for x in basis.singular_values],
        "rotation": basis.rotation.tolist(),
        "member_weights": basis.member_weights.tolist(),
        "weight_ref": basis.weight_ref,
        "source_hash": basis.source_hash,
        "explained": [float(x) for x in basis.explained],
    }
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_basis(stem, ensemble: CentredEnsemble | None = None) -> Basis:
    stem = Path(stem)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    for p in (csv_path, json_path):
        if not p.exists():
            raise MissingInputError(f"basis file not found: {p}")
    with csv_path.open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    vectors = np.array([[float(x) for x in r] for r in rows])
    meta = json.loads(json_path.read_text())
    if ensemble is not None and meta["source_hash"] != ensemble.hash:
        raise ConsistencyError("basis was built from a different ensemble")
    return Basis(vectors, np.array(meta["singular_values"]), np.array(meta["rotation"]),
                 np.array(meta["member_weights"]), meta["weight_ref"], meta["source_hash"],
                 np.array(meta["explained"]))
