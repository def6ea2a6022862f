"""Increment statistics: the quadratic-variation ratio check, the
drift/volatility decomposition by (time, x) binning, and a one-step Markov
diagnostic.

All ensemble estimators are streaming *consumers* (``begin`` / ``update`` /
``finish``) so several of them can share one traversal of a lazy ensemble.
Cells are (time window, x bin).  A window is ``window`` consecutive steps
(1 by default, i.e. one cell row per grid step); within each step, x bins
are equal-width over that step's ensemble range and a step's bin ``j`` is
pooled into the window's bin ``j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy import stats

from .errors import ConfigurationError, InsufficientDataError, ResolutionError
from .walker import Ensemble, Path

MAX_LOCATIONS = 100
_HIST_BINS = 48


# -- Heisenberg ratio check ------------------------------------------------------

@nb.njit(inline="always")
def _row_range(row):
    """(min, max) of a row, NaNs ignored; four running pairs break the compare chain."""
    n = row.shape[0]
    l0 = l1 = l2 = l3 = row[0]
    h0 = h1 = h2 = h3 = row[0]
    m = n - n % 4
    for i in range(0, m, 4):
        a = row[i]
        b = row[i + 1]
        c = row[i + 2]
        d = row[i + 3]
        if a < l0:
            l0 = a
        if a > h0:
            h0 = a
        if b < l1:
            l1 = b
        if b > h1:
            h1 = b
        if c < l2:
            l2 = c
        if c > h2:
            h2 = c
        if d < l3:
            l3 = d
        if d > h3:
            h3 = d
    for i in range(m, n):
        v = row[i]
        if v < l0:
            l0 = v
        if v > h0:
            h0 = v
    return min(min(l0, l1), min(l2, l3)), max(max(h0, h1), max(h2, h3))


_LANES = 4


@nb.njit(cache=True)
def _ratio_kernel(block, k0, dt, k_low, k_high, e0, hist, extremes, tallies, locations):
    """Fold r = (dx)^2 / dt of a block into running statistics.

    ``hist`` bins are quarter-octaves read off the float's bits: with
    r = 2^e (1 + f), bin ``4 (e - e0) + floor(4 f)`` covers
    [2^e (1 + q/4), 2^e (1 + (q+1)/4)).  ``tallies`` holds (count,
    violations, below histogram range, above histogram range).
    """
    T = block.shape[0] - 1
    n = block.shape[1]
    nh = hist.shape[0]
    base = 4 * (e0 + 1023) - 1
    lo_r = extremes[0]
    hi_r = extremes[1]
    r = np.empty(n)
    bits = r.view(np.uint64)
    # slot 0 collects ratios below the histogram, slot nh + 1 those above;
    # interleaved lanes keep consecutive increments off the same counter
    lanes = np.zeros((_LANES, nh + 2), dtype=np.int64)
    for j in range(T):
        row = block[j]
        nxt = block[j + 1]
        for i in range(n):
            d = nxt[i] - row[i]
            r[i] = d * d / dt
        rlo, rhi = _row_range(r)
        lo_r = min(lo_r, rlo)
        hi_r = max(hi_r, rhi)
        nv = 0
        for i in range(n):
            nv += (r[i] < k_low) | (r[i] > k_high)
        if nv:
            for i in range(n):
                if r[i] < k_low or r[i] > k_high:
                    c = tallies[1]
                    if c < locations.shape[0]:
                        locations[c, 0] = k0 + j
                        locations[c, 1] = i
                    tallies[1] = c + 1
        for i in range(n):
            idx = (np.int64(bits[i] >> np.uint64(50)) & 0x1FFF) - base
            lanes[i & (_LANES - 1), min(max(idx, 0), nh + 1)] += 1
    for lane in range(_LANES):
        tallies[2] += lanes[lane, 0]
        tallies[3] += lanes[lane, nh + 1]
        for q in range(nh):
            hist[q] += lanes[lane, q + 1]
    tallies[0] += T * n
    extremes[0] = lo_r
    extremes[1] = hi_r


def _quarter_octave_edges(k_low: float, k_high: float) -> tuple[int, np.ndarray]:
    e0 = math.floor(math.log2(k_low / 100.0))
    e1 = math.ceil(math.log2(k_high * 100.0))
    edges = [2.0**e * (1 + q / 4) for e in range(e0, e1) for q in range(4)]
    edges.append(2.0**e1)
    return e0, np.array(edges)


@dataclass
class HeisenbergReport:
    k_low: float
    k_high: float
    n_ratios: int
    ratio_min: float
    ratio_max: float
    violations: int
    violation_locations: list
    hist_edges: np.ndarray
    hist_counts: np.ndarray
    below: int
    above: int
    ratios: np.ndarray | None = field(default=None, repr=False)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return {
            "k_low": self.k_low,
            "k_high": self.k_high,
            "n_ratios": self.n_ratios,
            "ratio_min": self.ratio_min,
            "ratio_max": self.ratio_max,
            "violations": self.violations,
            "violation_locations": self.violation_locations,
            "distribution": {
                "edges": self.hist_edges.tolist(),
                "counts": self.hist_counts.tolist(),
                "below_range": self.below,
                "above_range": self.above,
            },
            "pass": self.passed,
        }


def _check_band(k_low, k_high):
    if not (0 < k_low < k_high) or not math.isfinite(k_high):
        raise ConfigurationError(f"need 0 < k_low < k_high, got ({k_low}, {k_high})")


class HeisenbergScan:
    """Accumulates r = (dx)^2 / dt over every increment of an ensemble."""

    def __init__(self, k_low: float, k_high: float):
        _check_band(k_low, k_high)
        self.k_low = float(k_low)
        self.k_high = float(k_high)
        self.e0, self.edges = _quarter_octave_edges(self.k_low, self.k_high)

    def begin(self, ens: Ensemble):
        if not ens.dense:
            raise ResolutionError("the ratio check needs every increment; ensemble is thinned")
        self.dt = ens.grid.dt
        self.path_ids = ens.path_ids
        self.hist = np.zeros(self.edges.size - 1, dtype=np.int64)
        self.extremes = np.array([math.inf, -math.inf])
        self.tallies = np.zeros(4, dtype=np.int64)
        self.locations = np.zeros((MAX_LOCATIONS, 2), dtype=np.int64)

    def update(self, k0: int, block: np.ndarray):
        _ratio_kernel(block, k0, self.dt, self.k_low, self.k_high, self.e0, self.hist,
                      self.extremes, self.tallies, self.locations)

    def finish(self) -> HeisenbergReport:
        n, viol, below, above = (int(v) for v in self.tallies)
        locs = [{"step": int(k), "path_id": int(self.path_ids[i])}
                for k, i in self.locations[:min(viol, MAX_LOCATIONS)]]
        return HeisenbergReport(self.k_low, self.k_high, n, float(self.extremes[0]),
                                float(self.extremes[1]), viol, locs, self.edges, self.hist,
                                below, above)


def heisenberg_check(path: Path, k_low: float, k_high: float) -> HeisenbergReport:
    """Check that every r_k = (x_{k+1} - x_k)^2 / dt lies in [k_low, k_high].

    The report carries the full ratio series (``ratios``) besides the
    summary statistics.
    """
    _check_band(k_low, k_high)
    if not path.dense:
        raise ResolutionError(f"path is thinned (stride {path.stride}); the ratio check needs every step")
    ens = Ensemble.from_values(path.values, path.grid, path_ids=[path.path_id])
    report = scan(ens, HeisenbergScan(k_low, k_high))
    d = np.diff(path.values)
    report.ratios = d * d / path.grid.dt
    return report


def heisenberg_ensemble(ens: Ensemble, k_low: float, k_high: float) -> HeisenbergReport:
    """The ratio check over every increment of every path."""
    return scan(ens, HeisenbergScan(k_low, k_high))


def ratio_ulp_error(path: Path, drift: float, sigma: float) -> float:
    """Largest deviation of (dx - b dt)^2 / dt from sigma^2, in ulps of the path values.

    A stored value off by one ulp moves the ratio by about
    ``2 |dx - b dt| ulp(x) / dt``; that one-ulp sensitivity (plus one ulp of
    sigma^2 for the final rounding) is the unit.
    """
    v = path.values
    dt = path.grid.dt
    d = np.diff(v) - drift * dt
    r = d * d / dt
    scale = np.maximum(np.maximum(np.abs(v[:-1]), np.abs(v[1:])), np.abs(d))
    unit = 2.0 * np.abs(d) * np.spacing(scale) / dt + np.spacing(sigma * sigma)
    return float(np.max(np.abs(r - sigma * sigma) / unit))

# -- shared kernels ---------------------------------------------------------------

@nb.njit(inline="always")
def _bin_scale(lo, hi, nbins):
    # x-bins are equal-width over [lo, hi]; a zero-width range is one bin
    return nbins / (hi - lo) if hi > lo else 0.0


@nb.njit(inline="always")
def _bin(x, lo, scale, nbins):
    return min(max(int((x - lo) * scale), 0), nbins - 1)


@nb.njit(inline="always")
def _nadd(s, c, k, v):
    # branch-free two-sum: c accumulates the exact rounding error of s + v
    t = s[k] + v
    z = t - s[k]
    c[k] += (s[k] - (t - z)) + (v - z)
    s[k] = t


@nb.njit(cache=True)
def _window_bins(block, j0, j1, nbins, bins, dxs, los, his):
    """Bin index and increment of every (step, path) in the window."""
    n = block.shape[1]
    for jj in range(j1 - j0):
        row = block[j0 + jj]
        nxt = block[j0 + jj + 1]
        lo, hi = _row_range(row)
        los[jj] = lo
        his[jj] = hi
        scale = _bin_scale(lo, hi, nbins)
        for i in range(n):
            bins[jj, i] = _bin(row[i], lo, scale, nbins)
            dxs[jj, i] = nxt[i] - row[i]


def _bin_window(block, j0, j1, nbins):
    w = j1 - j0
    bins = np.empty((w, block.shape[1]), dtype=np.int32)
    dxs = np.empty((w, block.shape[1]))
    los = np.empty(w)
    his = np.empty(w)
    _window_bins(block, j0, j1, nbins, bins, dxs, los, his)
    return bins, dxs, los, his


@nb.njit(cache=True, error_model="numpy")
def _decompose_window(bins, dxs, los, his, nbins, dt, sqdt, min_count,
                      count, drift, vol, eta_mean, eta_sq, center, x_lo, x_hi):
    w, n = bins.shape
    s = np.zeros(nbins)
    c = np.zeros(nbins)
    csum = np.zeros(nbins)
    cnt = np.zeros(nbins, dtype=np.int64)
    for jj in range(w):
        step_cnt = np.zeros(nbins, dtype=np.int64)
        for i in range(n):
            b = bins[jj, i]
            step_cnt[b] += 1
            _nadd(s, c, b, dxs[jj, i])
        width = (his[jj] - los[jj]) / nbins
        for b in range(nbins):
            cnt[b] += step_cnt[b]
            csum[b] += step_cnt[b] * (los[jj] + (b + 0.5) * width)
    bdt = np.empty(nbins)
    for b in range(nbins):
        count[b] = cnt[b]
        center[b] = csum[b] / cnt[b] if cnt[b] > 0 else np.nan
        if cnt[b] >= min_count:
            drift[b] = (s[b] + c[b]) / cnt[b] / dt
            bdt[b] = drift[b] * dt
        else:
            drift[b] = np.nan
            bdt[b] = np.nan
    x_lo[0] = los.min()
    x_hi[0] = his.max()
    s[:] = 0.0
    c[:] = 0.0
    for jj in range(w):
        for i in range(n):
            b = bins[jj, i]
            d = dxs[jj, i] - bdt[b]
            _nadd(s, c, b, d * d)
    inv = np.empty(nbins)
    for b in range(nbins):
        if cnt[b] >= min_count:
            vol[b] = math.sqrt((s[b] + c[b]) / cnt[b] / dt)
            inv[b] = vol[b] * sqdt
        else:
            vol[b] = np.nan
            inv[b] = np.nan
    s[:] = 0.0
    c[:] = 0.0
    s2 = np.zeros(nbins)
    c2 = np.zeros(nbins)
    for jj in range(w):
        for i in range(n):
            b = bins[jj, i]
            eta = (dxs[jj, i] - bdt[b]) / inv[b]
            _nadd(s, c, b, eta)
            _nadd(s2, c2, b, eta * eta)
    for b in range(nbins):
        if cnt[b] >= min_count:
            eta_mean[b] = (s[b] + c[b]) / cnt[b]
            eta_sq[b] = (s2[b] + c2[b]) / cnt[b]
        else:
            eta_mean[b] = np.nan
            eta_sq[b] = np.nan


@nb.njit(cache=True, error_model="numpy")
def _residual_window(block, j0, j1, nbins, dt, sqdt, drift, vol, out):
    n = block.shape[1]
    for j in range(j0, j1):
        row = block[j]
        lo, hi = _row_range(row)
        scale = _bin_scale(lo, hi, nbins)
        for i in range(n):
            b = _bin(row[i], lo, scale, nbins)
            d = (block[j + 1, i] - row[i]) - drift[b] * dt
            out[j - j0, i] = d / (vol[b] * sqdt)


# -- decomposition ------------------------------------------------------------------

@dataclass
class DecompositionEstimate:
    """Per-cell estimates; arrays have shape (n_windows, n_xbins).

    Undetermined cells (count < min_count) hold NaN.
    """

    dt: float
    window: int
    n_xbins: int
    min_count: int
    t_start: np.ndarray
    count: np.ndarray
    drift: np.ndarray
    volatility: np.ndarray
    eta_mean: np.ndarray
    eta_sq_mean: np.ndarray
    center: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray

    @property
    def determined(self) -> np.ndarray:
        return self.count >= self.min_count

    @property
    def degenerate(self) -> np.ndarray:
        """Determined cells whose volatility is zero to working precision."""
        scale = np.abs(self.drift) * self.dt + np.sqrt(self.dt) * np.abs(self.center) + np.sqrt(self.dt)
        tiny = 1e-9 * scale
        with np.errstate(invalid="ignore"):
            return self.determined & ~(self.volatility * math.sqrt(self.dt) > tiny)

    def edges(self, w: int) -> np.ndarray:
        """x-bin edges of window ``w`` (exact per step when window == 1)."""
        return np.linspace(self.x_lo[w], self.x_hi[w], self.n_xbins + 1)

    def summary(self) -> dict:
        det = self.determined
        vol = self.volatility[det]
        return {
            "n_windows": int(self.count.shape[0]),
            "window": self.window,
            "n_xbins": self.n_xbins,
            "min_count": self.min_count,
            "determined_cells": int(det.sum()),
            "degenerate_cells": int(self.degenerate.sum()),
            "volatility_min": float(vol.min()) if vol.size else None,
            "volatility_max": float(vol.max()) if vol.size else None,
        }


class DecompositionScan:
    """Streaming decomposition.

    ``method="two_pass"`` computes the drift, then every residual
    ``dx - b dt`` and ``eta`` explicitly.  ``method="moments"`` derives the
    same quantities from compensated per-cell sums of dx and dx^2 gathered
    in a single pass (shared with the Markov diagnostic inside one scan);
    it agrees with the two-pass route to rounding level.
    """

    def __init__(self, n_xbins: int, min_count: int, window: int = 1, method: str = "two_pass"):
        if n_xbins < 1:
            raise ConfigurationError(f"n_xbins must be >= 1, got {n_xbins}")
        if min_count < 30:
            raise ConfigurationError(f"min_count must be >= 30, got {min_count}")
        if window < 1:
            raise ConfigurationError(f"window must be >= 1, got {window}")
        if method not in ("two_pass", "moments"):
            raise ConfigurationError(f"unknown decomposition method {method!r}")
        self.n_xbins = int(n_xbins)
        self.min_count = int(min_count)
        self.window = int(window)
        self.method = method
        self.cells = CellScan(self.n_xbins, self.window) if method == "moments" else None
        # the two-pass route needs each window inside a single chunk
        self.align = self.window if method == "two_pass" else 1

    def begin(self, ens: Ensemble):
        if not ens.dense:
            raise ResolutionError("decomposition needs every increment; ensemble is thinned")
        if ens.n_paths < 2:
            raise InsufficientDataError("decomposition needs at least 2 paths")
        g = ens.grid
        self.dt = g.dt
        self.sqdt = g.sqrt_dt
        if self.cells is not None:
            return
        nw = -(-g.n_steps // self.window)
        shape = (nw, self.n_xbins)
        self.count = np.zeros(shape, dtype=np.int64)
        self.arrays = {k: np.full(shape, np.nan) for k in ("drift", "vol", "eta_mean", "eta_sq", "center")}
        self.x_lo = np.full(nw, np.nan)
        self.x_hi = np.full(nw, np.nan)
        self.t_start = np.arange(nw) * self.window * g.dt

    def update(self, k0: int, block: np.ndarray):
        if self.cells is not None:
            return
        T = block.shape[0] - 1
        a = self.arrays
        for j0 in range(0, T, self.window):
            j1 = min(T, j0 + self.window)
            w = (k0 + j0) // self.window
            bins, dxs, los, his = _bin_window(block, j0, j1, self.n_xbins)
            _decompose_window(bins, dxs, los, his, self.n_xbins, self.dt, self.sqdt, self.min_count,
                              self.count[w], a["drift"][w], a["vol"][w], a["eta_mean"][w],
                              a["eta_sq"][w], a["center"][w], self.x_lo[w:w + 1], self.x_hi[w:w + 1])

    def finish(self) -> DecompositionEstimate:
        if self.cells is not None:
            return self.cells.result.decomposition(self.min_count)
        a = self.arrays
        return DecompositionEstimate(self.dt, self.window, self.n_xbins, self.min_count, self.t_start,
                                     self.count, a["drift"], a["vol"], a["eta_mean"], a["eta_sq"],
                                     a["center"], self.x_lo, self.x_hi)


def estimate_decomposition(ensemble: Ensemble, n_xbins: int = 16, min_count: int = 1000,
                           window: int = 1, method: str = "two_pass") -> DecompositionEstimate:
    """Binned conditional drift and volatility.

    In each cell: ``b = mean(dx) / dt``, ``s = sqrt(mean((dx - b dt)^2) / dt)``
    (1/n normalisation) and residuals ``eta = (dx - b dt) / (s sqrt(dt))``.
    Cells with fewer than ``min_count`` increments are left undetermined.
    """
    return scan(ensemble, DecompositionScan(n_xbins, min_count, window, method))


def residuals(ensemble: Ensemble, estimate: DecompositionEstimate) -> np.ndarray:
    """Per-increment residuals, shape (n_steps, n_paths); needs window == 1."""
    if estimate.window != 1:
        raise ConfigurationError("per-increment residuals need a per-step estimate (window == 1)")
    out = np.empty((ensemble.grid.n_steps, ensemble.n_paths))
    for k0, block in ensemble.iter_chunks():
        for j in range(block.shape[0] - 1):
            k = k0 + j
            _residual_window(block, j, j + 1, estimate.n_xbins, estimate.dt, math.sqrt(estimate.dt),
                             estimate.drift[k], estimate.volatility[k], out[k:k + 1])
    return out


@dataclass
class ResidualMoments:
    count: np.ndarray
    mean: np.ndarray
    mean_sq: np.ndarray
    determined: np.ndarray
    violations: np.ndarray

    @property
    def passed(self) -> bool:
        return not bool(self.violations.any())

    def summary(self) -> dict:
        det = self.determined
        c = self.count[det]
        with np.errstate(invalid="ignore"):
            z_mean = np.abs(self.mean[det]) * np.sqrt(c)
            z_sq = np.abs(self.mean_sq[det] - 1.0) * np.sqrt(c)
        return {
            "determined_cells": int(det.sum()),
            "violating_cells": int(self.violations.sum()),
            "max_abs_mean_times_sqrt_count": float(np.nanmax(z_mean)) if c.size else None,
            "max_abs_mean_sq_minus_one_times_sqrt_count": float(np.nanmax(z_sq)) if c.size else None,
            "pass": self.passed,
        }


def residual_moments(estimate: DecompositionEstimate) -> ResidualMoments:
    """Sample moments of the residuals per cell, with invariant violations flagged.

    A determined cell violates if ``|mean| > 4/sqrt(n)``, ``|mean_sq - 1| > 8/sqrt(n)``,
    or its volatility is not positive.
    """
    det = estimate.determined
    if not det.any():
        raise InsufficientDataError("no determined cells")
    root = np.sqrt(np.maximum(estimate.count, 1))
    with np.errstate(invalid="ignore"):
        bad = (~(np.abs(estimate.eta_mean) <= 4.0 / root)) | (~(np.abs(estimate.eta_sq_mean - 1.0) <= 8.0 / root))
    violations = det & (bad | estimate.degenerate)
    return ResidualMoments(estimate.count, estimate.eta_mean, estimate.eta_sq_mean, det, violations)


@dataclass
class DriftRegression:
    slope: float
    intercept: float
    slope_stderr: float
    r_squared: float
    n_cells: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def regress_drift(estimate: DecompositionEstimate) -> DriftRegression:
    """Count-weighted least squares of the cell drifts on the cell centres."""
    det = estimate.determined
    if det.sum() < 3:
        raise InsufficientDataError("need at least 3 determined cells to regress drift")
    x = estimate.center[det]
    y = estimate.drift[det]
    w = estimate.count[det].astype(np.float64)
    xm = np.sum(w * x) / w.sum()
    ym = np.sum(w * y) / w.sum()
    sxx = np.sum(w * (x - xm) ** 2)
    if sxx == 0:
        raise InsufficientDataError("cell centres have no spread")
    slope = np.sum(w * (x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    resid = y - intercept - slope * x
    ss_res = np.sum(w * resid**2)
    ss_tot = np.sum(w * (y - ym) ** 2)
    dof = max(1, x.size - 2)
    stderr = math.sqrt(ss_res / dof / sxx)
    return DriftRegression(float(slope), float(intercept), float(stderr),
                           float(1 - ss_res / ss_tot) if ss_tot > 0 else 1.0, int(x.size))




# -- one-pass cell moments --------------------------------------------------------

GROUP_DOWN, GROUP_UP, GROUP_FIRST = 0, 1, 2


@nb.njit(inline="always")
def _merge(s, c, dst_s, dst_c, k, v, vc):
    t = dst_s[k] + v
    z = t - dst_s[k]
    dst_c[k] += (dst_s[k] - (t - z)) + (v - z) + vc
    dst_s[k] = t


@nb.njit(cache=True)
def _cell_moments(block, k0, window, nbins, prev, has_prev, x_lo, x_hi,
                  cnt, s1, c1, s2, c2, s4, csum):
    """Accumulate count, sum dx, sum dx^2, sum dx^4 per (window, bin, group).

    Cell arrays are indexed ``[w, 3 * bin + group]``; the group is the sign
    of the previous increment (0: <= 0, 1: > 0) or 2 for the first step of
    the grid, which has no predecessor.
    """
    T = block.shape[0] - 1
    n = block.shape[1]
    nc = 3 * nbins
    lc = np.zeros(nc, dtype=np.int64)
    ls1 = np.zeros(nc)
    lc1 = np.zeros(nc)
    ls2 = np.zeros(nc)
    lc2 = np.zeros(nc)
    ls4 = np.zeros(nc)
    lcs = np.zeros(nbins)
    rc = np.zeros(nc, dtype=np.int64)
    r1 = np.zeros(nc)
    r2 = np.zeros(nc)
    r4 = np.zeros(nc)
    wcur = k0 // window
    for j in range(T + 1):
        w = (k0 + j) // window
        if j == T or w != wcur:
            for q in range(nc):
                cnt[wcur, q] += lc[q]
                _merge(s1, c1, s1[wcur], c1[wcur], q, ls1[q], lc1[q])
                _merge(s2, c2, s2[wcur], c2[wcur], q, ls2[q], lc2[q])
                s4[wcur, q] += ls4[q]
            for b in range(nbins):
                csum[wcur, b] += lcs[b]
            lc[:] = 0
            ls1[:] = 0.0
            lc1[:] = 0.0
            ls2[:] = 0.0
            lc2[:] = 0.0
            ls4[:] = 0.0
            lcs[:] = 0.0
            wcur = w
        if j == T:
            break
        row = block[j]
        nxt = block[j + 1]
        lo, hi = _row_range(row)
        x_lo[w] = min(x_lo[w], lo)
        x_hi[w] = max(x_hi[w], hi)
        rc[:] = 0
        r1[:] = 0.0
        r2[:] = 0.0
        r4[:] = 0.0
        scale = _bin_scale(lo, hi, nbins)
        before = block[j - 1] if j > 0 else row
        for i in range(n):
            x = row[i]
            b = _bin(x, lo, scale, nbins)
            if j > 0:
                g = np.int64(x - before[i] > 0)
            elif has_prev:
                g = np.int64(prev[i] > 0)
            else:
                g = 2
            q = 3 * b + g
            d = nxt[i] - x
            d2 = d * d
            rc[q] += 1
            r1[q] += d
            r2[q] += d2
            r4[q] += d2 * d2
        # one row contributes a few hundred terms per cell; sum them plainly
        # and fold the row totals into the window with compensation
        width = (hi - lo) / nbins
        for q in range(nc):
            lc[q] += rc[q]
            _nadd(ls1, lc1, q, r1[q])
            _nadd(ls2, lc2, q, r2[q])
            ls4[q] += r4[q]
        for b in range(nbins):
            lcs[b] += (rc[3 * b] + rc[3 * b + 1] + rc[3 * b + 2]) * (lo + (b + 0.5) * width)


@dataclass
class CellMoments:
    """Per (window, x-bin, group) sums; arrays have shape (n_windows, n_xbins, 3)."""

    dt: float
    window: int
    n_xbins: int
    t_start: np.ndarray
    count: np.ndarray
    sum1: np.ndarray
    sum2: np.ndarray
    sum4: np.ndarray
    center: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray

    def decomposition(self, min_count: int) -> DecompositionEstimate:
        n = self.count.sum(axis=2)
        det = n >= min_count
        dt = self.dt
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = self.sum1.sum(axis=2) / n
            drift = np.where(det, mean / dt, np.nan)
            bdt = drift * dt
            resid_mean = mean - bdt
            # mean((dx - b dt)^2) = mean(dx^2) - 2 b dt mean(dx) + (b dt)^2
            resid_sq = self.sum2.sum(axis=2) / n - 2.0 * bdt * mean + bdt * bdt
            vol = np.where(det, np.sqrt(np.maximum(resid_sq, 0.0) / dt), np.nan)
            scale = vol * math.sqrt(dt)
            eta_mean = np.where(det, resid_mean / scale, np.nan)
            eta_sq = np.where(det, resid_sq / (scale * scale), np.nan)
        return DecompositionEstimate(dt, self.window, self.n_xbins, int(min_count), self.t_start,
                                     n, drift, vol, eta_mean, eta_sq, self.center, self.x_lo, self.x_hi)


class CellScan:
    """Single-pass accumulator of per-cell increment moments."""

    def __init__(self, n_xbins: int, window: int = 1):
        self.n_xbins = int(n_xbins)
        self.window = int(window)

    def begin(self, ens: Ensemble):
        if not ens.dense:
            raise ResolutionError("cell moments need every increment; ensemble is thinned")
        g = ens.grid
        self.dt = g.dt
        nw = -(-g.n_steps // self.window)
        shape = (nw, 3 * self.n_xbins)
        self.cnt = np.zeros(shape, dtype=np.int64)
        self.s1 = np.zeros(shape)
        self.c1 = np.zeros(shape)
        self.s2 = np.zeros(shape)
        self.c2 = np.zeros(shape)
        self.s4 = np.zeros(shape)
        self.csum = np.zeros((nw, self.n_xbins))
        self.x_lo = np.full(nw, np.inf)
        self.x_hi = np.full(nw, -np.inf)
        self.prev = np.zeros(ens.n_paths)
        self.t_start = np.arange(nw) * self.window * g.dt

    def update(self, k0: int, block: np.ndarray):
        _cell_moments(block, k0, self.window, self.n_xbins, self.prev, k0 > 0, self.x_lo, self.x_hi,
                      self.cnt, self.s1, self.c1, self.s2, self.c2, self.s4, self.csum)
        self.prev = block[-1] - block[-2]

    def finish(self) -> CellMoments:
        nw, nbins = self.csum.shape
        shape = (nw, nbins, 3)
        cnt = self.cnt.reshape(shape)
        with np.errstate(invalid="ignore", divide="ignore"):
            center = self.csum / cnt.sum(axis=2)
        self.result = CellMoments(self.dt, self.window, nbins, self.t_start, cnt,
                                  (self.s1 + self.c1).reshape(shape), (self.s2 + self.c2).reshape(shape),
                                  self.s4.reshape(shape), center, self.x_lo, self.x_hi)
        return self.result


# -- Markov diagnostic --------------------------------------------------------------

FAMILY_ALPHA = 2.0 * stats.norm.sf(4.0)
MARKOV_MIN_PATHS = 10_000


@dataclass
class MarkovReport:
    verdict: str
    n_tests: int
    z_threshold: float
    max_abs_z: float
    worst: dict | None
    n_paths: int
    window: int
    n_xbins: int
    min_group: int
    z_mean: np.ndarray | None = field(default=None, repr=False)
    z_sq: np.ndarray | None = field(default=None, repr=False)

    @property
    def consistent(self) -> bool:
        return self.verdict == "markov_consistent"

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "n_tests": self.n_tests,
            "z_threshold": self.z_threshold,
            "max_abs_z": self.max_abs_z,
            "worst_cell": self.worst,
            "n_paths": self.n_paths,
            "window": self.window,
            "n_xbins": self.n_xbins,
            "min_group": self.min_group,
        }


def _two_sample_z(m_up, v_up, n_up, m_dn, v_dn, n_dn, floor):
    se = np.sqrt(v_up / n_up + v_dn / n_dn)
    se = np.maximum(se, floor)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(se > 0, (m_up - m_dn) / se, 0.0)


def markov_statistics(cells: CellMoments, min_group: int = 50, rel_floor: float = 1e-9):
    """z statistics (mean of dx, mean of dx^2) per cell; NaN where a group is too small."""
    n_dn = cells.count[..., GROUP_DOWN].astype(np.float64)
    n_up = cells.count[..., GROUP_UP].astype(np.float64)
    ok = (n_dn >= min_group) & (n_up >= min_group)
    with np.errstate(invalid="ignore", divide="ignore"):
        m1 = cells.sum1[..., :2] / cells.count[..., :2]
        m2 = cells.sum2[..., :2] / cells.count[..., :2]
        m4 = cells.sum4[..., :2] / cells.count[..., :2]
        corr = cells.count[..., :2] / (cells.count[..., :2] - 1.0)
        v1 = np.maximum(m2 - m1 * m1, 0.0) * corr
        v2 = np.maximum(m4 - m2 * m2, 0.0) * corr
    # differences at rounding level are not evidence
    floor1 = rel_floor * np.sqrt(np.maximum(m2[..., 0], m2[..., 1]))
    floor2 = rel_floor * np.maximum(m2[..., 0], m2[..., 1])
    z1 = _two_sample_z(m1[..., 1], v1[..., 1], n_up, m1[..., 0], v1[..., 0], n_dn, floor1)
    z2 = _two_sample_z(m2[..., 1], v2[..., 1], n_up, m2[..., 0], v2[..., 0], n_dn, floor2)
    z1 = np.where(ok, z1, np.nan)
    z2 = np.where(ok, z2, np.nan)
    return z1, z2, cells.count[..., GROUP_UP], cells.count[..., GROUP_DOWN]


class MarkovScan:
    """Sign-of-previous-increment split of every (window, x-bin) cell."""

    def __init__(self, n_xbins: int = 16, window: int = 1, min_group: int = 50,
                 min_paths: int = MARKOV_MIN_PATHS, rel_floor: float = 1e-9):
        if n_xbins < 1 or window < 1 or min_group < 2:
            raise ConfigurationError("need n_xbins >= 1, window >= 1, min_group >= 2")
        self.n_xbins = int(n_xbins)
        self.window = int(window)
        self.min_group = int(min_group)
        self.min_paths = int(min_paths)
        self.rel_floor = float(rel_floor)
        self.cells = CellScan(self.n_xbins, self.window)

    def begin(self, ens: Ensemble):
        if not ens.dense:
            raise ResolutionError("Markov diagnostic needs every increment; ensemble is thinned")
        self.n_paths = ens.n_paths

    def update(self, k0: int, block: np.ndarray):
        pass

    def finish(self) -> MarkovReport:
        cells = self.cells.result
        z1, z2, n_up, n_dn = markov_statistics(cells, self.min_group, self.rel_floor)
        if self.n_paths < self.min_paths:
            # too few paths for a verdict; the per-cell statistics are still reported
            return MarkovReport("undetermined", 0, math.nan, math.nan, None, self.n_paths,
                                self.window, self.n_xbins, self.min_group, z1, z2)
        tested = np.isfinite(z1)
        n_tests = 2 * int(tested.sum())
        if n_tests == 0:
            return MarkovReport("undetermined", 0, math.nan, math.nan, None, self.n_paths,
                                self.window, self.n_xbins, self.min_group)
        threshold = max(4.0, float(stats.norm.isf(FAMILY_ALPHA / (2.0 * n_tests))))
        a1 = np.where(tested, np.abs(z1), -1.0)
        a2 = np.where(tested, np.abs(z2), -1.0)
        use_sq = a2.max() > a1.max()
        arr = a2 if use_sq else a1
        w, b = np.unravel_index(int(np.argmax(arr)), arr.shape)
        zmax = float(arr[w, b])
        worst = {
            "t_start": float(cells.t_start[w]),
            "window_index": int(w),
            "x_bin": int(b),
            "x_center": float(cells.center[w, b]),
            "statistic": "second_moment" if use_sq else "mean",
            "z": float((z2 if use_sq else z1)[w, b]),
            "n_up": int(n_up[w, b]),
            "n_down": int(n_dn[w, b]),
        }
        verdict = "markov_consistent" if zmax <= threshold else "non_markov"
        return MarkovReport(verdict, n_tests, threshold, zmax, worst, self.n_paths, self.window,
                            self.n_xbins, self.min_group, z1, z2)


def markov_diagnostic(ensemble: Ensemble, n_xbins: int = 16, window: int = 1,
                      min_group: int = 50) -> MarkovReport:
    """Test whether increments depend on the sign of the previous increment.

    Within each cell the increments are split by the previous step's sign
    and the two groups' means of dx and of dx^2 (the raw second moment, a
    variance proxy that stays informative when dx takes only two values)
    are compared with two-sample z statistics.  The verdict is
    ``markov_consistent`` when no |z| exceeds the Bonferroni threshold for a
    family-wise level equal to one two-sided 4-sigma test (never below 4),
    ``non_markov`` otherwise, and ``undetermined`` with fewer than 10^4 paths
    or no cell where both groups reach ``min_group``.
    """
    return scan(ensemble, MarkovScan(n_xbins, window, min_group))


# -- traversal ------------------------------------------------------------------------

def scan(ensemble: Ensemble, *consumers):
    """Feed one traversal of ``ensemble`` to every consumer; return their results.

    Consumers that rely on cell moments with the same binning share a
    single accumulator.  A block is only valid during the ``update`` call
    that receives it; consumers copy whatever they keep.
    """
    shared = {}
    for c in consumers:
        cells = getattr(c, "cells", None)
        if cells is not None:
            c.cells = shared.setdefault((cells.n_xbins, cells.window), cells)
    drivers = list(shared.values()) + list(consumers)
    align = 1
    for c in drivers:
        align = math.lcm(align, getattr(c, "align", 1))
    for c in drivers:
        c.begin(ensemble)
    steps = ensemble.chunk_steps()
    steps = max(align, steps - steps % align)
    for k0, block in ensemble.iter_chunks(steps, reuse=True):
        for c in drivers:
            c.update(k0, block)
    for c in shared.values():
        c.finish()
    results = [c.finish() for c in consumers]
    return results[0] if len(consumers) == 1 else results
