"""Gaussian-process emulators for scalar outputs and basis coefficients.

Squared-exponential kernel with one length-scale per input, a nugget, and a
constant or linear mean whose coefficients are estimated by generalized least
squares. Inputs are rescaled to the unit cube internally. Length-scales and
the nugget-to-signal ratio maximize the restricted likelihood (signal variance
profiled out) over seeded multi-start L-BFGS-B.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import linalg, optimize
from scipy.linalg import lapack
from scipy.spatial.distance import cdist

from .errors import FitError, MissingInputError, PreconditionError, ShapeError

MIN_NUGGET = 1e-10
LOG_LS_BOUNDS = (np.log(0.02), np.log(50.0))
LOG_G_BOUNDS = (np.log(1e-8), np.log(1.0))


def _mean_basis(xn, mean_spec, columns=None):
    ones = np.ones((xn.shape[0], 1))
    if mean_spec == "constant":
        return ones
    if mean_spec == "linear":
        return np.hstack([ones, xn if columns is None else xn[:, list(columns)]])
    raise ValueError(f"unknown mean_spec {mean_spec!r}")


def _corr(a, b, ls):
    return np.exp(-0.5 * cdist(a / ls, b / ls, "sqeuclidean"))


def _chol_inverse(chol):
    """Inverse of ``L L^T`` from its lower Cholesky factor."""
    inv, info = lapack.dpotri(chol, lower=1)
    if info:
        raise linalg.LinAlgError("inverse from Cholesky factor failed")
    return np.tril(inv) + np.tril(inv, -1).T


@dataclass(frozen=True, eq=False)
class GpEmulator:
    inputs: np.ndarray
    targets: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    mean_spec: str
    length_scales: np.ndarray
    signal_var: float
    nugget_var: float
    kernel_spec: str = "squared_exponential"
    constant: bool = False
    mean_inputs: tuple | None = None

    @property
    def d(self):
        return self.inputs.shape[1]

    def normalize(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.d:
            raise ShapeError(f"expected {self.d} inputs, got {x.shape[1]}")
        span = np.where(self.upper > self.lower, self.upper - self.lower, 1.0)
        return (x - self.lower) / span

    @cached_property
    def _state(self):
        xn = self.normalize(self.inputs)
        h = _mean_basis(xn, self.mean_spec, self.mean_inputs)
        g = self.nugget_var / self.signal_var
        r = _corr(xn, xn, self.length_scales) + g * np.eye(len(xn))
        chol = linalg.cholesky(r, lower=True)
        rih = linalg.cho_solve((chol, True), h)
        q = h.T @ rih
        qc = linalg.cholesky(q, lower=True)
        beta = linalg.cho_solve((qc, True), rih.T @ self.targets)
        alpha = linalg.cho_solve((chol, True), self.targets - h @ beta)
        lh = linalg.solve_triangular(chol, h, lower=True)
        return xn, h, chol, qc, beta, alpha, g, lh

    @cached_property
    def _chol_inv(self):
        # explicit L^-1 turns the per-batch triangular solve into a faster matrix product
        chol = self._state[2]
        return linalg.solve_triangular(chol, np.eye(chol.shape[0]), lower=True)

    @property
    def beta(self):
        return self._state[4]


def _reml(theta, xn, y, h, dists):
    """Negative restricted log-likelihood (sigma^2 profiled) and its gradient."""
    m, p = h.shape
    d = xn.shape[1]
    ls = np.exp(theta[:d])
    g = np.exp(theta[d])
    r = np.exp(-0.5 * np.tensordot(1.0 / ls ** 2, dists, axes=1))
    rg = r + g * np.eye(m)
    try:
        chol = linalg.cholesky(rg, lower=True)
    except linalg.LinAlgError:
        return 1e25, np.zeros_like(theta)
    rinv = _chol_inverse(chol)
    rih = rinv @ h
    q = h.T @ rih
    try:
        qc = linalg.cholesky(q, lower=True)
    except linalg.LinAlgError:
        return 1e25, np.zeros_like(theta)
    pmat = rinv - rih @ linalg.cho_solve((qc, True), rih.T)
    alpha = pmat @ y
    s2 = float(y @ alpha) / (m - p)
    if s2 <= 0:
        return 1e25, np.zeros_like(theta)
    f = 0.5 * ((m - p) * np.log(s2) + 2 * np.sum(np.log(np.diag(chol)))
               + 2 * np.sum(np.log(np.diag(qc))))
    grad = np.empty_like(theta)
    aa = np.outer(alpha, alpha) / s2
    w = (pmat - aa) * r
    # dR/dlog(ls_k) = R * dist_k / ls_k^2
    grad[:d] = 0.5 * (dists.reshape(d, -1) @ w.ravel()) / ls ** 2
    grad[d] = 0.5 * g * (np.trace(pmat) - float(alpha @ alpha) / s2)
    return f, grad


def fit_gp(design, targets, mean_spec="linear", kernel_spec="squared_exponential",
           n_restarts=10, seed=0, bounds=None) -> GpEmulator:
    """Fit a GP emulator to ``targets`` observed at the rows of ``design``.

    ``bounds`` is an optional (lower, upper) pair used to rescale inputs; by
    default the design's own range is used.
    """
    if kernel_spec != "squared_exponential":
        raise ValueError(f"unsupported kernel {kernel_spec!r}")
    x = np.atleast_2d(np.asarray(design, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    m, d = x.shape
    if y.size != m:
        raise ShapeError("targets length does not match design rows")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise FitError("non-finite design or targets")
    if mean_spec == "linear" and m < d + 2:
        raise PreconditionError(f"linear mean needs at least d + 2 = {d + 2} runs, got {m}")
    if bounds is None:
        lower, upper = x.min(axis=0), x.max(axis=0)
    else:
        lower, upper = (np.asarray(b, dtype=float) for b in bounds)
    if np.ptp(y) <= 1e-12 * max(1.0, np.abs(y).max()):
        warnings.warn("targets have zero variance; returning a constant emulator", RuntimeWarning,
                      stacklevel=2)
        return GpEmulator(x, y, lower, upper, "constant", np.ones(d), MIN_NUGGET, MIN_NUGGET,
                          kernel_spec, constant=True)

    # inputs held fixed across the design cannot enter a linear trend
    varied = np.ptp(x, axis=0) > 0
    cols = None
    if mean_spec == "linear" and not varied.all():
        cols = tuple(int(i) for i in np.flatnonzero(varied))
    proto = GpEmulator(x, y, lower, upper, mean_spec, np.ones(d), 1.0, 1e-6, kernel_spec,
                       mean_inputs=cols)
    xn = proto.normalize(x)
    h = _mean_basis(xn, mean_spec, cols)
    y_scale = np.std(y)
    ys = (y - y.mean()) / y_scale
    dists = np.stack([(xn[:, k][:, None] - xn[:, k][None, :]) ** 2 for k in range(d)])

    rng = np.random.default_rng(seed)
    starts = [np.r_[np.full(d, np.log(0.5)), np.log(1e-4)]]
    for _ in range(max(n_restarts, 1) - 1):
        starts.append(np.r_[rng.uniform(np.log(0.1), np.log(3.0), d),
                            rng.uniform(np.log(1e-6), np.log(1e-2))])
    box = [LOG_LS_BOUNDS] * d + [LOG_G_BOUNDS]
    best, fails = None, []
    for s in starts:
        try:
            res = optimize.minimize(_reml, s, args=(xn, ys, h, dists), jac=True, method="L-BFGS-B",
                                    bounds=box, options={"maxiter": 200})
        except (ValueError, linalg.LinAlgError) as exc:
            fails.append(str(exc))
            continue
        if not np.isfinite(res.fun) or res.fun >= 1e24:
            fails.append(res.message if isinstance(res.message, str) else str(res.message))
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise FitError(f"hyperparameter optimization failed at all {len(starts)} restarts: {fails[:3]}")
    ls = np.exp(best.x[:d])
    g = float(np.exp(best.x[d]))
    # recover the profiled signal variance on the original target scale
    tmp = GpEmulator(x, ys, lower, upper, mean_spec, ls, 1.0, g, kernel_spec, mean_inputs=cols)
    _, hh, _, _, beta, alpha, _, _ = tmp._state
    s2 = float((ys - hh @ beta) @ alpha) / (m - hh.shape[1]) * y_scale ** 2
    nugget = max(g * s2, MIN_NUGGET)
    return GpEmulator(x, y, lower, upper, mean_spec, ls, s2, nugget, kernel_spec,
                      mean_inputs=cols)


def predict(em: GpEmulator, x):
    """Posterior mean and variance at one point (d,) or a batch (k, d).

    The variance includes the nugget and the uncertainty of the estimated
    mean-function coefficients.
    """
    single = np.ndim(x) == 1
    if em.constant:
        xn = em.normalize(x)
        mean = np.full(xn.shape[0], em.targets.mean())
        var = np.full(xn.shape[0], em.nugget_var)
        return (mean[0], var[0]) if single else (mean, var)
    xtr, h, chol, qc, beta, alpha, g, lh = em._state
    xn = em.normalize(x)
    if np.any(xn < -1e-9) or np.any(xn > 1 + 1e-9):
        warnings.warn("prediction outside the emulator's input range", RuntimeWarning, stacklevel=2)
    r = _corr(xn, xtr, em.length_scales)
    hx = _mean_basis(xn, em.mean_spec, em.mean_inputs)
    mean = hx @ beta + r @ alpha
    v = em._chol_inv @ r.T
    u = hx.T - lh.T @ v
    w = linalg.solve_triangular(qc, u, lower=True)
    var = em.signal_var * (1.0 + g - np.einsum("ij,ij->j", v, v)
                           + np.einsum("ij,ij->j", w, w))
    var = np.maximum(var, em.nugget_var)
    return (mean[0], var[0]) if single else (mean, var)


def sample_posterior(em: GpEmulator, x, m_samples, seed=None):
    """Independent draws from the marginal posterior at ``x``.

    Returns shape (m_samples,) for a single point or (k, m_samples) for a batch.
    """
    if m_samples < 1:
        raise ValueError("m_samples must be at least 1")
    mean, var = predict(em, x)
    rng = np.random.default_rng(seed)
    mean = np.atleast_1d(mean)
    sd = np.sqrt(np.atleast_1d(var))
    out = mean[:, None] + sd[:, None] * rng.standard_normal((mean.size, m_samples))
    return out[0] if np.ndim(x) == 1 else out


def loo(em: GpEmulator):
    """Closed-form leave-one-out means, variances and standardized errors.

    Hyperparameters are held fixed; the mean coefficients are re-estimated
    for each left-out point.
    """
    y = em.targets
    if em.constant:
        z = np.zeros_like(y)
        return y.copy(), np.full_like(y, em.nugget_var), z
    _, h, chol, qc, _, _, _, _ = em._state
    rinv = _chol_inverse(chol)
    rih = rinv @ h
    pmat = (rinv - rih @ linalg.cho_solve((qc, True), rih.T)) / em.signal_var
    py = pmat @ y
    diag = np.diag(pmat)
    err = py / diag
    var = 1.0 / diag
    return y - err, var, err / np.sqrt(var)


def to_dict(em: GpEmulator):
    return {
        "inputs": em.inputs.tolist(), "targets": em.targets.tolist(),
        "lower": em.lower.tolist(), "upper": em.upper.tolist(),
        "mean_spec": em.mean_spec, "kernel_spec": em.kernel_spec,
        "length_scales": em.length_scales.tolist(), "signal_var": em.signal_var,
        "nugget_var": em.nugget_var, "constant": em.constant,
        "mean_inputs": None if em.mean_inputs is None else list(em.mean_inputs),
    }


def from_dict(d) -> GpEmulator:
    return GpEmulator(np.array(d["inputs"], dtype=float), np.array(d["targets"], dtype=float),
                      np.array(d["lower"], dtype=float), np.array(d["upper"], dtype=float),
                      d["mean_spec"], np.array(d["length_scales"], dtype=float),
                      float(d["signal_var"]), float(d["nugget_var"]), d["kernel_spec"],
                      bool(d["constant"]),
                      None if d.get("mean_inputs") is None else tuple(d["mean_inputs"]))


def save_emulator(em: GpEmulator, path):
    Path(path).write_text(json.dumps(to_dict(em), indent=1, sort_keys=True))


def load_emulator(path) -> GpEmulator:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"emulator file not found: {path}")
    return from_dict(json.loads(path.read_text()))


def write_loo_csv(em: GpEmulator, path):
    mean, var, z = loo(em)
    lines = ["index,target,loo_mean,loo_var,z"]
    for i in range(len(z)):
        lines.append(f"{i},{em.targets[i]!r},{float(mean[i])!r},{float(var[i])!r},{float(z[i])!r}")
    Path(path).write_text("\n".join(lines) + "\n")
