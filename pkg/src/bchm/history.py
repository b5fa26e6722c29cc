"""Implausibility measures, NROY predicates, designs and multi-wave refocusing.

Points of the joint space are rows ``[x, c]``: simulator parameters followed
by boundary coefficients. A wave predicate is built from fitted emulators for
a set of outputs; each NROY space is its parent intersected with one wave
predicate. NROY volume fractions are Monte-Carlo estimates over a fixed pool
of points so that successive estimates are nested.
"""
from __future__ import annotations

import ast
import operator
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import linalg, stats
from scipy.spatial.distance import cdist

from . import emulator as gp
from .basis import Basis, CentredEnsemble, project, reconstruct, svd_basis, n_for_fraction
from .boundary import BoundaryModel
from .errors import (BoundsError, ConfigError, DataError, EmptyNroyError, FactorizationError,
                     RangeError, ShapeError)
from .observations import ObservationSet

THRESHOLD_BINARY = 10.0
KEEP_PROBABILITY = 0.05


# ---------------------------------------------------------------- measures

def implausibility(z, pred_mean, total_var):
    """Squared Mahalanobis distance between ``z`` and ``pred_mean``.

    ``total_var`` may be a scalar, a vector of per-entry variances or a full
    covariance matrix.
    """
    d = np.atleast_1d(np.asarray(z, dtype=float) - np.asarray(pred_mean, dtype=float))
    v = np.asarray(total_var, dtype=float)
    if v.ndim <= 1:
        v = np.broadcast_to(v, d.shape)
        if np.any(v <= 0):
            raise FactorizationError("implausibility variance must be positive")
        return float(np.sum(d * d / v))
    try:
        c = linalg.cho_factor(v, lower=True)
    except linalg.LinAlgError as exc:
        raise FactorizationError("implausibility variance is not positive definite") from exc
    return float(d @ linalg.cho_solve(c, d))


def jth_max_implausibility(impls, j):
    """The ``j``-th largest of ``impls`` (``j = 1`` is the maximum)."""
    a = np.asarray(impls, dtype=float).ravel()
    if not 1 <= j <= a.size:
        raise RangeError(f"j={j} outside 1..{a.size}")
    return float(np.partition(a, a.size - j)[a.size - j])


@lru_cache(maxsize=None)
def chi2_bound(ell, q=0.995):
    """``q`` quantile of the chi-squared distribution with ``ell`` degrees of freedom."""
    return float(stats.chi2.ppf(q, ell))


def scaled_implausibility(impl, ell):
    """Rescale so that 3 corresponds to the 99.5% chi-squared bound."""
    if ell < 1:
        raise ValueError("ell must be at least 1")
    return 3.0 * np.asarray(impl, dtype=float) / chi2_bound(int(ell))


_OPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
        ast.Div: operator.truediv, ast.Pow: operator.pow, ast.BitXor: operator.pow}


def parse_bound(expr, ell, spec_id="?"):
    """Evaluate a bound expression such as ``"3^2"`` or ``"0.25*ell"``.

    Only numbers, ``ell``, ``+ - * / ^ **`` and parentheses are accepted.
    Literals are read as exact decimals, so ``0.025*ell`` at 868 is 21.7.
    """
    if isinstance(expr, (int, float)) and not isinstance(expr, bool):
        value = float(expr)
    else:
        def ev(node):
            if isinstance(node, ast.Expression):
                return ev(node.body)
            if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
                return Fraction(repr(node.value))
            if isinstance(node, ast.Name) and node.id == "ell":
                return Fraction(ell)
            if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
                return _OPS[type(node.op)](ev(node.left), ev(node.right))
            if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
                v = ev(node.operand)
                return -v if isinstance(node.op, ast.USub) else v
            raise ValueError("unsupported token")
        try:
            value = float(ev(ast.parse(str(expr), mode="eval")))
        except (SyntaxError, ValueError, ZeroDivisionError, TypeError, OverflowError) as exc:
            raise ConfigError(f"spec {spec_id}: malformed bound expression {expr!r}") from exc
    if not np.isfinite(value) or value <= 0:
        raise ConfigError(f"spec {spec_id}: bound must be positive, got {value}")
    return value


# ------------------------------------------------------------ output specs

@dataclass(frozen=True, eq=False)
class OutputSpec:
    """One calibration target: a scalar output or a binary region map."""

    id: str
    kind: str
    waves: tuple
    ell: int
    obs: object
    bound: object
    sigma_e: float = 0.0
    sigma_eta: float = 0.0
    binary_summary: str = "probability"
    threshold: float = THRESHOLD_BINARY

    def __post_init__(self):
        if self.kind not in ("scalar", "binary"):
            raise ConfigError(f"spec {self.id}: unknown kind {self.kind!r}")
        object.__setattr__(self, "waves", tuple(int(w) for w in self.waves))
        if self.kind == "scalar":
            if not self.sigma_e > 0:
                raise ConfigError(f"spec {self.id}: scalar outputs need sigma_e > 0")
            object.__setattr__(self, "obs", float(self.obs))
        else:
            z = np.asarray(self.obs, dtype=float).ravel()
            if not np.all((z == 0) | (z == 1)):
                raise ConfigError(f"spec {self.id}: binary observations must be 0/1")
            if z.size != self.ell:
                raise ConfigError(f"spec {self.id}: ell={self.ell} but {z.size} observations")
            if self.binary_summary not in ("probability", "min", "mean"):
                raise ConfigError(f"spec {self.id}: unknown summary {self.binary_summary!r}")
            object.__setattr__(self, "obs", z.astype(np.int8))
        self.bound_value  # validate early

    @property
    def bound_value(self):
        return parse_bound(self.bound, self.ell, self.id)


# ----------------------------------------------------- prior coefficient space

def location_implausibility(model: BoundaryModel, obs: ObservationSet, c):
    """Scaled per-location implausibility of ``h(c)`` against the observations.

    Returns an (n_c, n_observed_locations) array; each location pools its
    observed times with zero discrepancy and emulator variance.
    """
    c = np.atleast_2d(np.asarray(c, dtype=float))
    flat = obs.flat_index
    # h(c) only at the observed entries
    h = model.mu[flat] + c @ model.vectors[flat].T
    resid2 = (h - obs.value) ** 2 / obs.error_var
    locs, inv, counts = np.unique(obs.location, return_inverse=True, return_counts=True)
    member = np.zeros((inv.size, locs.size))
    member[np.arange(inv.size), inv] = 1.0
    out = resid2 @ member
    chi = np.array([chi2_bound(int(k)) for k in counts])
    return 3.0 * out / chi


def in_prior_space(model, obs, c, j):
    """Membership of ``c`` in the coefficient space: j-th max scaled value < 3."""
    imp = location_implausibility(model, obs, c)
    if not 1 <= j <= imp.shape[1]:
        raise RangeError(f"j={j} outside 1..{imp.shape[1]} observed locations")
    jth = -np.sort(-imp, axis=1)[:, j - 1]
    return jth < 3.0


@dataclass(frozen=True, eq=False)
class PriorSpace:
    samples: np.ndarray
    n_drawn: int
    lower: np.ndarray
    upper: np.ndarray
    j: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def acceptance(self):
        return self.samples.shape[0] / self.n_drawn


def prior_coeff_space(model: BoundaryModel, obs: ObservationSet, prior_bounds, j, n_samples,
                      seed=None, batch=20_000) -> PriorSpace:
    """Uniform draws from the prior box kept when fewer than ``j`` locations are implausible."""
    lower, upper = (np.asarray(b, dtype=float) for b in prior_bounds)
    if lower.shape != (model.n_coefficients,) or upper.shape != lower.shape:
        raise ShapeError("prior bounds must match the number of coefficients")
    if np.any(upper < lower):
        raise BoundsError("prior upper bound below lower bound")
    n_loc = np.unique(obs.location).size
    if not 1 <= j <= n_loc:
        raise RangeError(f"j={j} outside 1..{n_loc} observed locations")
    rng = np.random.default_rng(seed)
    kept, jth_all = [], []
    done = 0
    while done < n_samples:
        k = min(batch, n_samples - done)
        c = lower + (upper - lower) * rng.random((k, lower.size))
        imp = location_implausibility(model, obs, c)
        jth = -np.sort(-imp, axis=1)[:, j - 1]
        kept.append(c[jth < 3.0])
        jth_all.append(np.quantile(imp, [0.05, 0.5, 0.95], axis=0))
        done += k
    samples = np.vstack(kept)
    diag = {"location_quantiles": np.mean(jth_all, axis=0).round(12).tolist()}
    if samples.shape[0] == 0:
        warnings.warn(f"coefficient space is empty after {n_samples} draws; per-location "
                      f"implausibility quantiles (5/50/95%): {diag['location_quantiles']}",
                      RuntimeWarning, stacklevel=2)
    return PriorSpace(samples, n_samples, lower, upper, j, diag)


# ------------------------------------------------------------------ binary

def binarize(field, threshold=THRESHOLD_BINARY):
    """1 where the field exceeds ``threshold``; values at the threshold count as absent."""
    f = np.asarray(field, dtype=float)
    if not np.all(np.isfinite(f)):
        raise DataError("field contains non-finite values")
    return (f > threshold).astype(np.int8)


def binary_implausibility(z_b, em_set, basis, mean, x, m_samples=100, threshold=THRESHOLD_BINARY,
                          seed=None):
    """Misclassification counts for ``m_samples`` posterior field draws.

    Coefficient ``i`` is drawn as ``mean_i + sd_i * eps[i]`` with
    ``eps = rng.standard_normal((q, m_samples))``; the same standard normals
    are shared by every point in a batch, so a point's counts do not depend on
    which batch it is evaluated in. Fields are reconstructed on ``basis``
    around ``mean`` and binarized. Returns (m_samples,) for a single point or
    (k, m_samples).
    """
    z_b = np.asarray(z_b).ravel()
    single = np.ndim(x) == 1
    xx = np.atleast_2d(x)
    g = basis.vectors if isinstance(basis, Basis) else np.asarray(basis, dtype=float)
    if g.shape[1] != len(em_set):
        raise ShapeError(f"{len(em_set)} emulators for a rank-{g.shape[1]} basis")
    if z_b.size != g.shape[0]:
        raise ShapeError("binary map does not match the basis length")
    rng = np.random.default_rng(seed)
    mom = [gp.predict(em, xx) for em in em_set]
    mu = np.stack([np.atleast_1d(m) for m, _ in mom])            # (q, k)
    sd = np.sqrt(np.stack([np.atleast_1d(v) for _, v in mom]))
    eps = rng.standard_normal((len(em_set), m_samples))
    # field[k, s, l] = mean_l + sum_i g_li (mu_ik + sd_ik eps_is); threshold the deviation
    level = threshold - (np.asarray(mean, dtype=float) + mu.T @ g.T)     # (k, l)
    zb = z_b.astype(bool)
    counts = np.empty((xx.shape[0], m_samples), dtype=np.int64)
    # small blocks keep the (points, samples, cells) deviations in cache
    for s in range(0, xx.shape[0], 128):
        e = min(s + 128, xx.shape[0])
        draws = (sd.T[s:e, None, :] * eps.T[None, :, :]).reshape((e - s) * m_samples, -1)
        dev = (draws @ g.T).reshape(e - s, m_samples, -1)
        counts[s:e] = np.count_nonzero((dev > level[s:e, None, :]) != zb, axis=2)
    return counts[0] if single else counts


def binary_nroy_membership(counts, n_t, summary="probability"):
    """Keep decision for misclassification counts; works along the last axis."""
    counts = np.asarray(counts, dtype=float)
    if counts.shape[-1] == 0:
        raise ValueError("counts must be nonempty")
    if summary == "probability":
        return np.mean(counts <= n_t, axis=-1) >= KEEP_PROBABILITY
    if summary == "min":
        return counts.min(axis=-1) <= n_t
    if summary == "mean":
        return counts.mean(axis=-1) <= n_t
    raise ValueError(f"unknown summary {summary!r}")


def is_bimodal(counts, bins=10):
    """Flag count samples whose histogram has two peaks separated by a dip."""
    h, _ = np.histogram(np.asarray(counts, dtype=float), bins=bins)
    peaks = [i for i in range(bins) if h[i] > 0 and (i == 0 or h[i] >= h[i - 1])
             and (i == bins - 1 or h[i] > h[i + 1])]
    if len(peaks) < 2:
        return False
    a, b = peaks[0], peaks[-1]
    return bool(h[a:b + 1].min() < 0.5 * min(h[a], h[b]))


# ------------------------------------------------------------------ designs

def _unit(points, lower, upper):
    span = np.where(upper > lower, upper - lower, 1.0)
    return (points - lower) / span


def _min_dist(u):
    d = cdist(u, u)
    np.fill_diagonal(d, np.inf)
    return d.min()


def lhs_design(bounds, n_points, seed=None, n_candidates=50):
    """Latin hypercube over ``bounds`` with the best maximin of ``n_candidates`` tries."""
    lower, upper = (np.asarray(b, dtype=float) for b in bounds)
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    flat = upper == lower
    if np.any(flat):
        warnings.warn(f"collapsed dimensions {np.flatnonzero(flat).tolist()}", RuntimeWarning,
                      stacklevel=2)
    rng = np.random.default_rng(seed)
    d = lower.size
    best, best_d = None, -np.inf
    for _ in range(n_candidates):
        u = (np.argsort(rng.random((n_points, d)), axis=0) + rng.random((n_points, d))) / n_points
        md = _min_dist(u[:, ~flat]) if np.any(~flat) else 0.0
        if md > best_d:
            best, best_d = u, md
    return lower + (upper - lower) * best


def maximin_select(candidates, n, lower, upper, chosen=None):
    """Greedily add ``n`` candidates that maximize the distance to points already chosen."""
    u = _unit(np.asarray(candidates, dtype=float), lower, upper)
    if n <= 0:
        return np.zeros(0, dtype=int)
    if chosen is not None and len(chosen):
        dmin = cdist(u, _unit(np.asarray(chosen, dtype=float), lower, upper)).min(axis=1)
        picks = []
    else:
        centre = np.full(u.shape[1], 0.5)
        first = int(np.argmin(np.linalg.norm(u - centre, axis=1)))
        picks = [first]
        dmin = np.linalg.norm(u - u[first], axis=1)
    while len(picks) < n:
        dmin[picks] = -np.inf
        i = int(np.argmax(dmin))
        if not np.isfinite(dmin[i]):
            break
        picks.append(i)
        dmin = np.minimum(dmin, np.linalg.norm(u - u[i], axis=1))
    return np.array(picks, dtype=int)


# --------------------------------------------------------------- predicates

@dataclass(frozen=True, eq=False)
class ScalarEmulation:
    emulator: gp.GpEmulator


@dataclass(frozen=True, eq=False)
class RegionEmulation:
    basis: Basis
    mean: np.ndarray
    emulators: tuple


@dataclass(frozen=True, eq=False)
class WavePredicate:
    """The rule-out rule of one wave: emulated specs plus a combination rule."""

    specs: tuple
    emulations: dict
    combine: str = "all"
    j: int = 1
    m_samples: int = 100
    seed: int = 0

    def evaluate(self, points):
        """Keep mask, per-spec failure flags and per-spec scores at ``points``.

        Scores are the implausibility for scalar outputs and the summarized
        misclassification count for regions; lower is better.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[0]
        fails = np.zeros((n, len(self.specs)), dtype=bool)
        scores = np.zeros((n, len(self.specs)))
        for k, spec in enumerate(self.specs):
            emu = self.emulations[spec.id]
            if spec.kind == "scalar":
                m, v = gp.predict(emu.emulator, pts)
                imp = (spec.obs - m) ** 2 / (spec.sigma_e + spec.sigma_eta + v)
                scores[:, k] = imp
                if self.combine == "all":
                    fails[:, k] = imp >= spec.bound_value
                else:
                    fails[:, k] = scaled_implausibility(imp, 1) >= 3.0
            else:
                n_t = spec.bound_value
                counts = np.zeros((n, self.m_samples))
                for s in range(0, n, 2000):
                    counts[s:s + 2000] = binary_implausibility(
                        spec.obs, emu.emulators, emu.basis, emu.mean, pts[s:s + 2000],
                        self.m_samples, spec.threshold, seed=(self.seed, k))
                fails[:, k] = ~binary_nroy_membership(counts, n_t, spec.binary_summary)
                stat = counts.min(axis=1) if spec.binary_summary == "min" else counts.mean(axis=1)
                scores[:, k] = stat
        if self.combine == "all":
            keep = ~fails.any(axis=1)
        else:
            keep = fails.sum(axis=1) < self.j
        return keep, fails, scores


@dataclass(frozen=True, eq=False)
class NroySpace:
    """Nested not-ruled-out-yet space: parent membership and one more predicate."""

    wave_index: int
    predicate: object
    parent: "NroySpace | None" = None

    def contains(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        keep = np.ones(pts.shape[0], dtype=bool) if self.parent is None else self.parent.contains(pts)
        if keep.any():
            keep[keep] = self._own(pts[keep])
        return keep

    def _own(self, pts):
        p = self.predicate
        if isinstance(p, WavePredicate):
            return p.evaluate(pts)[0]
        return np.asarray(p(pts), dtype=bool)

    def scores(self, points):
        if isinstance(self.predicate, WavePredicate):
            return self.predicate.evaluate(points)[2]
        return np.zeros((np.atleast_2d(points).shape[0], 0))


def uniform_sampler(bounds):
    lower, upper = (np.asarray(b, dtype=float) for b in bounds)

    def draw(n, rng):
        return lower + (upper - lower) * rng.random((n, lower.size))
    return draw


def nroy_resample(space: NroySpace, bounds, n_points, frac_best=0.0, seed=None, sampler=None,
                  pool_factor=20, budget=500_000, batch=5_000):
    """Design inside ``space``: lowest-score points per output plus a maximin remainder."""
    lower, upper = (np.asarray(b, dtype=float) for b in bounds)
    rng = np.random.default_rng(seed)
    draw = sampler or uniform_sampler((lower, upper))
    want = pool_factor * n_points
    pool, tried = [], 0
    while sum(len(p) for p in pool) < want and tried < budget:
        cand = draw(batch, rng)
        tried += batch
        pool.append(cand[space.contains(cand)])
    pool = np.vstack(pool) if pool else np.zeros((0, lower.size))
    if pool.shape[0] == 0:
        raise EmptyNroyError(f"no NROY members found in {tried} candidates "
                             f"(wave {space.wave_index})")
    n_points = min(n_points, pool.shape[0])
    picks = []
    n_best = int(round(frac_best * n_points))
    if n_best:
        sc = space.scores(pool)
        if sc.shape[1]:
            per = int(np.ceil(n_best / sc.shape[1]))
            for k in range(sc.shape[1]):
                for i in np.argsort(sc[:, k], kind="stable"):
                    if len(picks) >= min(n_best, (k + 1) * per):
                        break
                    if i not in picks:
                        picks.append(int(i))
    rest = np.setdiff1d(np.arange(pool.shape[0]), picks)
    extra = maximin_select(pool[rest], n_points - len(picks), lower, upper,
                           chosen=pool[picks] if picks else None)
    idx = np.r_[np.array(picks, dtype=int), rest[extra]]
    return pool[idx]


# --------------------------------------------------------------------- waves

@dataclass(frozen=True, eq=False)
class WaveState:
    """History-matching state after ``index`` waves.

    ``pool`` is a fixed Monte-Carlo sample from the base distribution with
    ``pool_mask`` marking current NROY members; ``base_fraction`` is the
    volume of the base space relative to the original box.
    """

    index: int
    space: NroySpace
    bounds: tuple
    pool: np.ndarray
    pool_mask: np.ndarray
    base_fraction: float
    fractions: tuple
    reports: tuple = ()

    @property
    def fraction(self):
        return self.fractions[-1]

    @property
    def fraction_se(self):
        p = self.pool_mask.mean()
        return self.base_fraction * np.sqrt(p * (1 - p) / self.pool_mask.size)


def initial_state(base_predicate, bounds, pool, base_fraction):
    """Wave-0 state whose NROY space is the base region (e.g. the coefficient space)."""
    space = NroySpace(0, base_predicate)
    mask = space.contains(pool)
    frac = base_fraction * float(mask.mean())
    return WaveState(0, space, tuple(np.asarray(b, dtype=float) for b in bounds), pool, mask,
                     base_fraction, (frac,))


def fit_spec_emulation(spec: OutputSpec, design, outputs, bounds, n_restarts=10, seed=0,
                       variance_fraction=0.95, max_vectors=5):
    """Emulators for one spec from design inputs and simulator outputs."""
    if spec.kind == "scalar":
        y = np.asarray(outputs, dtype=float).ravel()
        return ScalarEmulation(gp.fit_gp(design, y, "constant", n_restarts=n_restarts, seed=seed,
                                         bounds=bounds))
    f = np.asarray(outputs, dtype=float)
    if f.ndim != 2 or f.shape[1] != spec.ell:
        raise ShapeError(f"spec {spec.id}: region outputs must be (n_runs, {spec.ell})")
    ens = CentredEnsemble.from_runs(f.T)
    full = svd_basis(ens)
    q = min(n_for_fraction(full, variance_fraction), max_vectors)
    basis = full.truncate(q)
    coeffs = project(basis, None, ens.data)
    ems = tuple(gp.fit_gp(design, coeffs[i], "linear", n_restarts=n_restarts, seed=seed + i,
                          bounds=bounds) for i in range(q))
    return RegionEmulation(basis, ens.mean, ems)


def run_wave(state: WaveState, design, ensemble_outputs, specs, combine="all", j=1,
             m_samples=100, n_restarts=10, seed=0):
    """Emulate the wave's outputs, add the rule-out predicate and update the volume estimate.

    ``ensemble_outputs`` maps spec id to the outputs of the runs at ``design``;
    only specs listing wave ``state.index + 1`` are used.
    """
    wave = state.index + 1
    active = [s for s in specs if wave in s.waves]
    if not active:
        raise ConfigError(f"no output specs registered for wave {wave}")
    emulations = {}
    for k, spec in enumerate(active):
        if spec.id not in ensemble_outputs:
            raise ConfigError(f"spec {spec.id} has no ensemble data for wave {wave}")
        emulations[spec.id] = fit_spec_emulation(spec, design, ensemble_outputs[spec.id],
                                                 state.bounds, n_restarts, seed + 100 * k)
    if combine == "all":
        j = 1
    elif combine != "jth_max":
        raise ConfigError(f"unknown combine rule {combine!r}")
    elif not 1 <= j <= len(active):
        raise ConfigError(f"wave {wave}: j={j} outside 1..{len(active)}")
    pred = WavePredicate(tuple(active), emulations, combine, j, m_samples, seed)
    space = NroySpace(wave, pred, state.space)
    mask = state.pool_mask.copy()
    if mask.any():
        keep, fails, _ = pred.evaluate(state.pool[mask])
        rates = {s.id: float(fails[:, k].mean()) for k, s in enumerate(active)}
        mask[mask] = keep
    else:
        rates = {s.id: 0.0 for s in active}
    frac = state.base_fraction * float(mask.mean())
    report = {"wave": wave, "combine": combine, "j": j, "specs": [s.id for s in active],
              "fraction": frac, "rule_out_rates": rates, "n_design": int(np.shape(design)[0])}
    return WaveState(wave, space, state.bounds, state.pool, mask, state.base_fraction,
                     state.fractions + (frac,), state.reports + (report,))
