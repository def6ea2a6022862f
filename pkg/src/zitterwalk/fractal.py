"""Divider (variation) dimension of sample paths.

For a scale Delta the mean absolute increment <|x(t + Delta) - x(t)|> is
taken over all paths and all aligned, non-overlapping times t = j Delta.
A log-log least-squares fit gives the scaling exponent H and D = 1 / H.

D = 1 / H is the dimension of the trajectory traced by x(t), which is 2
for diffusive paths.  The graph {(t, x(t))} has dimension 2 - H instead
(3/2 for diffusive paths); that quantity is not estimated here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InsufficientDataError, ResolutionError
from .walker import Ensemble

MIN_SCALE_STEPS = 16
MIN_SCALES = 4
MIN_DECADES = 1.5
MIN_R_SQUARED = 0.99
DEFAULT_SCALE_STEPS = (16, 64, 256, 1024, 4096)


def _steps(ensemble: Ensemble, delta: float) -> int:
    grid = ensemble.grid
    if not (math.isfinite(delta) and delta > 0):
        raise ConfigurationError(f"scale must be positive, got {delta!r}")
    m = grid.steps_for(delta)
    if m is None:
        raise ResolutionError(f"scale {delta!r} is not an integer multiple of dt = {grid.dt!r}")
    if m % ensemble.stride:
        raise ResolutionError(f"scale of {m} steps is not a multiple of the storage stride {ensemble.stride}")
    return m


class IncrementScan:
    """Streams sums of |x((j+1) m) - x(j m)| for several step counts m."""

    def __init__(self, steps):
        self.steps = [int(m) for m in steps]

    def begin(self, ens: Ensemble):
        x0 = ens.initial_values()
        self.last = [x0.copy() for _ in self.steps]
        self.parts = [[] for _ in self.steps]
        self.counts = [0] * len(self.steps)

    def update(self, k0: int, block: np.ndarray):
        hi = k0 + block.shape[0] - 1
        for s, m in enumerate(self.steps):
            first = (k0 // m + 1) * m
            for k in range(first, hi + 1, m):
                row = block[k - k0]
                self.parts[s].append(float(np.abs(row - self.last[s]).sum()))
                self.counts[s] += row.shape[0]
                self.last[s] = row.copy()

    def finish(self) -> list[tuple[float, int]]:
        return [(math.fsum(p), c) for p, c in zip(self.parts, self.counts)]


def increment_sums(ensemble: Ensemble, steps) -> list[tuple[float, int]]:
    """(sum of |increment|, count) per step count; stored ensembles may be thinned."""
    if ensemble.stored is not None:
        out = []
        for m in steps:
            idx = np.arange(0, ensemble.grid.n_steps + 1, m) // ensemble.stride
            d = np.abs(np.diff(ensemble.stored[idx], axis=0))
            out.append((math.fsum(d.sum(axis=0)), d.size))
        return out
    from .estimator import scan
    return scan(ensemble, IncrementScan(steps))


def mean_increment(ensemble: Ensemble, delta: float) -> float:
    """Mean of |x(t + delta) - x(t)| over all paths and aligned t = j delta.

    ``delta`` must be a whole number of steps and at most a quarter of
    the horizon.
    """
    m = _steps(ensemble, delta)
    if m * 4 > ensemble.grid.n_steps:
        raise ConfigurationError(f"scale {delta!r} exceeds a quarter of the horizon")
    (total, count), = increment_sums(ensemble, [m])
    return total / count


@dataclass
class DimensionEstimate:
    scales: np.ndarray
    mean_increments: np.ndarray
    counts: np.ndarray
    hurst: float
    intercept: float
    r_squared: float
    rejected_scales: list

    @property
    def reliable(self) -> bool:
        return self.r_squared >= MIN_R_SQUARED and self.scales.size >= MIN_SCALES

    @property
    def raw_dimension(self) -> float:
        return 1.0 / self.hurst if self.hurst != 0 else math.inf

    @property
    def dimension(self) -> float | None:
        """D = 1 / H, or None when the fit is not reliable."""
        return self.raw_dimension if self.reliable else None

    @property
    def scale_range(self) -> tuple[float, float]:
        return float(self.scales[0]), float(self.scales[-1])

    def series(self) -> list[tuple[float, float]]:
        return list(zip(self.scales.tolist(), self.mean_increments.tolist()))

    def to_dict(self) -> dict:
        return {
            "scales": self.scales.tolist(),
            "mean_increments": self.mean_increments.tolist(),
            "counts": self.counts.tolist(),
            "hurst": self.hurst,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "dimension": self.dimension,
            "raw_dimension": self.raw_dimension,
            "reliable": self.reliable,
            "scale_range": list(self.scale_range),
            "rejected_scales": self.rejected_scales,
        }


def valid_scale_steps(ensemble: Ensemble, scales) -> tuple[list[int], list]:
    """Split requested scales into accepted step counts and rejections with reasons."""
    grid = ensemble.grid
    accepted, rejected = set(), []
    for delta in scales:
        try:
            m = _steps(ensemble, float(delta))
        except (ResolutionError, ConfigurationError) as exc:
            rejected.append({"scale": float(delta), "reason": str(exc)})
            continue
        if m < MIN_SCALE_STEPS:
            rejected.append({"scale": float(delta), "reason": f"below {MIN_SCALE_STEPS} dt"})
        elif 4 * m > grid.n_steps:
            rejected.append({"scale": float(delta), "reason": "above horizon / 4"})
        else:
            accepted.add(m)
    return sorted(accepted), rejected


def fit_dimension(steps, sums, dt: float, rejected=()) -> DimensionEstimate:
    """Least-squares fit of log <|dx|> on log Delta."""
    m = np.asarray(steps, dtype=np.int64)
    scales = m * dt
    totals = np.array([s for s, _ in sums])
    counts = np.array([c for _, c in sums], dtype=np.int64)
    means = totals / counts
    if np.any(means <= 0):
        raise InsufficientDataError("a scale has zero mean increment; the log-log fit is undefined")
    lx = np.log(scales)
    ly = np.log(means)
    sxx = np.sum((lx - lx.mean()) ** 2)
    if sxx == 0:
        raise InsufficientDataError("degenerate fit: all scales are equal")
    hurst = float(np.sum((lx - lx.mean()) * (ly - ly.mean())) / sxx)
    intercept = float(ly.mean() - hurst * lx.mean())
    ss_res = float(np.sum((ly - intercept - hurst * lx) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return DimensionEstimate(scales, means, counts, hurst, intercept, r2, list(rejected))


def estimate_dimension(ensemble: Ensemble, scales=None) -> DimensionEstimate:
    """Divider dimension D = 1 / H from the scaling of mean increments.

    ``scales`` are time intervals (default 16, 64, 256, 1024 and 4096 dt).
    Scales that are not whole steps, below 16 dt or above horizon / 4 are
    dropped and listed in ``rejected_scales``; at least four distinct
    scales spanning 1.5 decades must remain.  Order and repeats in
    ``scales`` do not matter.
    """
    dt = ensemble.grid.dt
    if scales is None:
        scales = [m * dt for m in DEFAULT_SCALE_STEPS]
    steps, rejected = valid_scale_steps(ensemble, scales)
    if len(steps) < MIN_SCALES:
        raise InsufficientDataError(f"need at least {MIN_SCALES} valid scales, got {len(steps)} "
                                    f"(rejected: {rejected})")
    if math.log10(steps[-1] / steps[0]) < MIN_DECADES - 1e-12:
        raise InsufficientDataError(f"scales must span at least {MIN_DECADES} decades")
    return fit_dimension(steps, increment_sums(ensemble, steps), dt, rejected)
