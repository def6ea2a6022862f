"""Walk versus Gaussian-increment diffusion, and the coupled stability bound.

The reference solver runs the same left-point scheme as the walk with the
+-1 draws replaced by standard normals, so both share their discretisation
and differ only in the noise law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .errors import ConfigurationError, InsufficientDataError, NumericDomainError
from .fields import CoefficientField
from .grid import TimeGrid, make_grid
from .noise import NoiseStream
from .walker import Ensemble, simulate_ensemble, simulate_path


def gaussian_reference(field: CoefficientField, x0_sampler, grid: TimeGrid, n_paths: int,
                       seed: int, storage: str = "auto", stride: int = 1) -> Ensemble:
    """Ensemble of the explicit scheme driven by standard normal increments."""
    return simulate_ensemble(field, x0_sampler, grid, n_paths, seed, storage=storage,
                             stride=stride, noise="gaussian")


def affine_transition(b0: float, b1: float, s0: float, dt: float, m: int) -> tuple[float, float, float]:
    """Law of ``m`` steps of the Gaussian scheme for ``b = b0 + b1 x``, ``sigma = s0``.

    One step maps x to ``c x + b0 dt + s0 sqrt(dt) Z`` with ``c = 1 + b1 dt``,
    so ``m`` steps give ``A x + B + sqrt(V) Z`` with ``A = c^m`` and the
    geometric sums ``B = b0 dt (c^m - 1)/(c - 1)``, ``V = s0^2 dt (c^2m - 1)/(c^2 - 1)``.
    Both sums go through log1p/expm1 so tiny ``b1 dt`` keeps full precision.
    """
    h = b1 * dt
    if m == 0:
        return 1.0, 0.0, 0.0
    if h == 0.0:
        return 1.0, m * b0 * dt, m * s0 * s0 * dt
    if h <= -1.0:
        raise NumericDomainError(f"1 + b1*dt = {1 + h} is not positive")
    lc = math.log1p(h)
    a = math.exp(m * lc)
    geo = math.expm1(m * lc) / h
    geo2 = math.expm1(2 * m * lc) / (h * (2.0 + h))
    return a, b0 * dt * geo, s0 * s0 * dt * geo2


def gaussian_reference_marginals(field: CoefficientField, x0_sampler, grid: TimeGrid, n_paths: int,
                                 seed: int, indices) -> np.ndarray:
    """Rows of the Gaussian reference at ``indices`` drawn from the exact transition law.

    For affine fields the Gaussian scheme is a linear recursion, so its
    values at increasing grid indices form a Gaussian Markov chain with
    closed-form transitions.  Chaining those transitions samples the same
    joint law as stepping the scheme, at a cost independent of ``n_steps``.
    Transition ``r`` uses the standard normal draw of step ``r`` of each
    path's Gaussian stream; x(0) comes from the usual initial-condition draws.
    """
    from .philox import gaussian_matrix
    from .walker import X0Spec

    if field.affine is None:
        raise ConfigurationError("the transition-law reference needs an affine field")
    b0, b1, s0 = field.affine
    idx = [int(k) for k in indices]
    if any(k < 0 or k > grid.n_steps for k in idx):
        raise ConfigurationError("marginal index outside the grid")
    order = sorted(set(idx))
    ids = np.arange(int(n_paths), dtype=np.int64)
    x = X0Spec.parse(x0_sampler).sample(seed, ids).astype(np.float64)
    z = gaussian_matrix(seed, ids, 0, len(order))
    rows = {}
    prev = 0
    for r, k in enumerate(order):
        a, b, v = affine_transition(b0, b1, s0, grid.dt, k - prev)
        x = a * x + b + math.sqrt(v) * z[r]
        rows[k] = x
        prev = k
    out = np.empty((len(idx), int(n_paths)))
    for i, k in enumerate(idx):
        out[i] = rows[k]
    return out


# -- distances ----------------------------------------------------------------------

def _sample(values, name: str) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64).ravel()
    if a.size == 0:
        raise InsufficientDataError(f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise ConfigurationError(f"{name} contains non-finite values")
    return a


def ks_distance(samples_a, samples_b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup_x |F_a(x) - F_b(x)|."""
    a = np.sort(_sample(samples_a, "samples_a"))
    b = np.sort(_sample(samples_b, "samples_b"))
    # both empirical CDFs are right-continuous steps, so the sup is attained
    # at a pooled sample point
    pooled = np.concatenate([a, b])
    fa = np.searchsorted(a, pooled, side="right") / a.size
    fb = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def wasserstein1(samples_a, samples_b) -> float:
    """Empirical Wasserstein-1 distance.

    Equal sizes: mean |a_(i) - b_(i)| over the sorted samples.  Unequal
    sizes: the exact integral of |F_a - F_b| between the two empirical
    distributions (no resampling), which reduces to the sorted coupling
    when the sizes match.
    """
    a = np.sort(_sample(samples_a, "samples_a"))
    b = np.sort(_sample(samples_b, "samples_b"))
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    pooled = np.sort(np.concatenate([a, b]))
    widths = np.diff(pooled)
    fa = np.searchsorted(a, pooled[:-1], side="right") / a.size
    fb = np.searchsorted(b, pooled[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * widths))


# -- calibration ----------------------------------------------------------------------

def _spawn_seed(seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class KSCalibration:
    threshold: float
    quantile: float
    n_pairs: int
    n_a: int
    n_b: int
    samples: np.ndarray = field(repr=False)

    def pass_rate(self) -> float:
        return float(np.mean(self.samples <= self.threshold))

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "quantile": self.quantile,
            "n_pairs": self.n_pairs,
            "n_a": self.n_a,
            "n_b": self.n_b,
            "null_ks_mean": float(self.samples.mean()),
            "null_ks_max": float(self.samples.max()),
        }


def calibrate_ks_threshold(field: CoefficientField, x0_sampler, horizon: float, n_a: int, n_b: int,
                           seed: int, n_pairs: int = 100, quantile: float = 0.99,
                           n_steps: int = 1) -> KSCalibration:
    """Null quantile of the KS statistic between independent Gaussian-reference runs.

    Each of ``n_pairs`` pairs is two reference ensembles (sizes ``n_a`` and
    ``n_b``) with independent seeds, compared at ``horizon``.  For
    continuous marginals the two-sample KS statistic under equality has a
    law that does not depend on the distribution, so a coarse grid
    (``n_steps``, default 1) yields the same null quantile as the
    production grid at a fraction of the cost.
    """
    if n_pairs < 1 or not (0 < quantile < 1):
        raise ConfigurationError("need n_pairs >= 1 and 0 < quantile < 1")
    grid = make_grid(n_steps, horizon)
    ks = np.empty(n_pairs)
    for p in range(n_pairs):
        ra = gaussian_reference(field, x0_sampler, grid, n_a, _spawn_seed(seed, p, 0), storage="dense")
        rb = gaussian_reference(field, x0_sampler, grid, n_b, _spawn_seed(seed, p, 1), storage="dense")
        ks[p] = ks_distance(ra.final_values(), rb.final_values())
    return KSCalibration(float(np.quantile(ks, quantile)), quantile, n_pairs, n_a, n_b, ks)


# -- comparison -------------------------------------------------------------------------

@dataclass
class ComparisonReport:
    times: list
    walk_times: list
    reference_times: list
    ks: list
    w1: list
    n_walk: int
    n_reference: int
    ks_threshold: float
    w1_threshold: float | None
    independent: bool

    @property
    def verdicts(self) -> list[bool]:
        out = []
        for k, w in zip(self.ks, self.w1):
            ok = k <= self.ks_threshold
            if self.w1_threshold is not None:
                ok = ok and w <= self.w1_threshold
            out.append(bool(ok))
        return out

    @property
    def passed(self) -> bool:
        return all(self.verdicts)

    def to_dict(self) -> dict:
        return {
            "times": self.times,
            "walk_times": self.walk_times,
            "reference_times": self.reference_times,
            "ks": self.ks,
            "w1": self.w1,
            "n_walk": self.n_walk,
            "n_reference": self.n_reference,
            "ks_threshold": self.ks_threshold,
            "w1_threshold": self.w1_threshold,
            "independent": self.independent,
            "verdicts": ["pass" if v else "fail" for v in self.verdicts],
            "pass": self.passed,
        }

    def rows(self) -> list[dict]:
        return [{"t": t, "ks": k, "w1": w, "verdict": "pass" if v else "fail"}
                for t, k, w, v in zip(self.times, self.ks, self.w1, self.verdicts)]


def _same_source(a: Ensemble, b: Ensemble) -> bool:
    return (a.seed is not None and a.seed == b.seed and a.noise == b.noise
            and np.array_equal(a.path_ids, b.path_ids))


def marginal_indices(grid: TimeGrid, times) -> list[int]:
    return [grid.index_of(float(t)) for t in times]


def equivalence_report(walk: Ensemble, reference: Ensemble, times, ks_threshold: float,
                       w1_threshold: float | None = None, walk_marginals=None,
                       reference_marginals=None) -> ComparisonReport:
    """Compare one-time marginals of two ensembles at the grid points nearest ``times``.

    ``walk_marginals`` / ``reference_marginals`` may carry rows already
    extracted (shape (len(times), n_paths)) to avoid another traversal.
    The report records whether the two ensembles are independent; identical
    sources (same seed, noise and path ids) are allowed and give KS = 0.
    """
    hw, hr = walk.grid.horizon, reference.grid.horizon
    if not math.isclose(hw, hr, rel_tol=1e-12, abs_tol=0.0):
        raise ConfigurationError(f"horizons differ: {hw!r} vs {hr!r}")
    if not (ks_threshold > 0):
        raise ConfigurationError("ks_threshold must be positive")
    times = [float(t) for t in times]
    if not times:
        raise ConfigurationError("no comparison times")
    iw = marginal_indices(walk.grid, times)
    ir = marginal_indices(reference.grid, times)
    mw = walk.at_indices(iw) if walk_marginals is None else walk_marginals
    mr = reference.at_indices(ir) if reference_marginals is None else reference_marginals
    ks = [ks_distance(a, b) for a, b in zip(mw, mr)]
    w1 = [wasserstein1(a, b) for a, b in zip(mw, mr)]
    return ComparisonReport(times, [walk.grid.time(k) for k in iw], [reference.grid.time(k) for k in ir],
                            ks, w1, walk.n_paths, reference.n_paths, float(ks_threshold),
                            None if w1_threshold is None else float(w1_threshold),
                            not _same_source(walk, reference))


# -- stability ------------------------------------------------------------------------------

@dataclass
class LipschitzProbe:
    drift_slope: float
    volatility_slope: float
    declared: float
    n_points: int

    @property
    def consistent(self) -> bool:
        return max(self.drift_slope, self.volatility_slope) <= self.declared * (1 + 1e-9) + 1e-12

    def to_dict(self) -> dict:
        return {
            "max_drift_slope": self.drift_slope,
            "max_volatility_slope": self.volatility_slope,
            "declared_bound": self.declared,
            "n_points": self.n_points,
            "consistent": self.consistent,
        }


def lipschitz_probe(field: CoefficientField, t_range, x_range, declared: float,
                    n_points: int = 2000, seed: int = 0) -> LipschitzProbe:
    """Largest finite-difference slope in x of b and sigma over a sampled region."""
    t0, t1 = map(float, t_range)
    x0, x1 = map(float, x_range)
    rng = np.random.default_rng(seed)
    t = rng.uniform(t0, t1, n_points)
    x = rng.uniform(x0, x1, n_points)
    h = max(1e-6, 1e-6 * max(abs(x0), abs(x1)))
    b_lo, s_lo = field.evaluate(t, x - h)
    b_hi, s_hi = field.evaluate(t, x + h)
    db = np.abs(b_hi - b_lo) / (2 * h)
    ds = np.abs(s_hi - s_lo) / (2 * h)
    if not (np.all(np.isfinite(db)) and np.all(np.isfinite(ds))):
        raise NumericDomainError("coefficient slopes are not finite over the probed region")
    return LipschitzProbe(float(db.max()), float(ds.max()), float(declared), n_points)


@dataclass
class StabilityReport:
    sup_gap: float
    gap_argmax: int
    delta_b: float
    delta_sigma: float
    delta_x0: float
    lipschitz_bound: float
    bound_final: float
    max_bound_excess: float
    rounding_slack_final: float
    n_steps: int
    gaps: np.ndarray = field(repr=False)
    bound: np.ndarray = field(repr=False)
    slack: np.ndarray = field(repr=False)
    probe: LipschitzProbe | None = None

    @property
    def passed(self) -> bool:
        """Observed gap within the Gronwall bound (plus rounding slack) at every step."""
        return bool(np.all(self.gaps <= self.bound + self.slack))

    @property
    def passed_strict(self) -> bool:
        return bool(np.all(self.gaps <= self.bound))

    def to_dict(self) -> dict:
        return {
            "sup_gap": self.sup_gap,
            "sup_gap_step": self.gap_argmax,
            "delta_b": self.delta_b,
            "delta_sigma": self.delta_sigma,
            "delta_x0": self.delta_x0,
            "lipschitz_bound": self.lipschitz_bound,
            "gronwall_bound_final": self.bound_final,
            "max_gap_minus_bound": self.max_bound_excess,
            "rounding_slack_final": self.rounding_slack_final,
            "n_steps": self.n_steps,
            "lipschitz_probe": self.probe.to_dict() if self.probe else None,
            "pass_strict": self.passed_strict,
            "pass": self.passed,
        }


def gronwall_bound(n_steps: int, dt: float, lipschitz: float, delta_b: float,
                   delta_sigma: float, delta_x0: float) -> np.ndarray:
    """bound_0 = delta_x0; bound_{k+1} = bound_k (1 + L dt + L sqrt(dt)) + delta_b dt + delta_sigma sqrt(dt)."""
    out = np.empty(n_steps + 1)
    growth = 1.0 + lipschitz * dt + lipschitz * math.sqrt(dt)
    _recur(out, float(delta_x0), growth, delta_b * dt + delta_sigma * math.sqrt(dt))
    return out


@nb.njit(cache=True)
def _recur(out, start, growth, inc):
    b = start
    out[0] = b
    for k in range(1, out.shape[0]):
        b = b * growth + inc
        out[k] = b


def stability_check(field1: CoefficientField, field2: CoefficientField, x01: float, x02: float,
                    grid: TimeGrid, seed: int, lipschitz_bound: float, path_id: int = 0,
                    probe: bool = True) -> StabilityReport:
    """Drive two walks with one noise stream and compare their gap with a discrete Gronwall bound.

    ``delta_b`` and ``delta_sigma`` are the largest coefficient differences
    |b1 - b2|, |sigma1 - sigma2| along the second walk; ``lipschitz_bound``
    is the declared Lipschitz constant in x of field1's coefficients.  The
    pass flag allows, per step, the floating-point rounding of the two
    recursions (8 ulps of the larger path value, accumulated).
    """
    if not (lipschitz_bound >= 0 and math.isfinite(lipschitz_bound)):
        raise ConfigurationError("lipschitz_bound must be finite and >= 0")
    stream = NoiseStream(seed, path_id)
    p1 = simulate_path(field1, x01, grid, stream)
    p2 = simulate_path(field2, x02, grid, stream)
    t = grid.times()[:-1]
    x2 = p2.values[:-1]
    b1, s1 = field1.evaluate(t, x2)
    b2, s2 = field2.evaluate(t, x2)
    delta_b = float(np.max(np.abs(b1 - b2)))
    delta_s = float(np.max(np.abs(s1 - s2)))
    if not (math.isfinite(delta_b) and math.isfinite(delta_s)):
        raise NumericDomainError("coefficient differences are not finite along the walk")
    delta_x0 = abs(float(x01) - float(x02))
    gaps = np.abs(p1.values - p2.values)
    bound = gronwall_bound(grid.n_steps, grid.dt, lipschitz_bound, delta_b, delta_s, delta_x0)
    scale = np.maximum(np.abs(p1.values), np.abs(p2.values))
    slack = np.concatenate([[0.0], np.cumsum(8.0 * np.spacing(scale[1:]))])
    pr = None
    if probe:
        lo = float(min(p1.values.min(), p2.values.min()))
        hi = float(max(p1.values.max(), p2.values.max()))
        if hi == lo:
            hi = lo + 1.0
        pr = lipschitz_probe(field1, (0.0, grid.horizon), (lo, hi), lipschitz_bound, seed=seed)
    k = int(np.argmax(gaps))
    return StabilityReport(float(gaps[k]), k, delta_b, delta_s, delta_x0, float(lipschitz_bound),
                           float(bound[-1]), float(np.max(gaps - bound)), float(slack[-1]),
                           grid.n_steps, gaps, bound, slack, pr)


def coupled_gap_closed_form(delta_b: float, delta_sigma: float, delta_x0: float, grid: TimeGrid,
                            eps: np.ndarray) -> np.ndarray:
    """Exact gap series of two constant-coefficient walks on shared noise.

    gap_k = |delta_x0 + delta_b t_k + delta_sigma sqrt(dt) S_k| with
    S_k = eps_0 + ... + eps_{k-1}.
    """
    s = np.concatenate([[0.0], np.cumsum(np.asarray(eps, dtype=np.float64))])
    return np.abs(delta_x0 + delta_b * grid.times() + delta_sigma * grid.sqrt_dt * s)


__all__ = [
    "ComparisonReport", "KSCalibration", "LipschitzProbe", "StabilityReport", "affine_transition",
    "calibrate_ks_threshold", "coupled_gap_closed_form", "equivalence_report", "gaussian_reference",
    "gaussian_reference_marginals", "gronwall_bound", "ks_distance", "lipschitz_probe", "stability_check",
    "wasserstein1",
]
