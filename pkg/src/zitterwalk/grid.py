"""The discretised time axis: ``t_k = k * dt`` for ``k = 0..n_steps``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class TimeGrid:
    n_steps: int
    dt: float
    horizon: float

    def __post_init__(self):
        if self.n_steps < 1 or not self.dt > 0:
            raise ConfigurationError(f"invalid grid: n_steps={self.n_steps}, dt={self.dt}")

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    @property
    def sqrt_dt(self) -> float:
        return math.sqrt(self.dt)

    def time(self, k: int) -> float:
        return k * self.dt

    def times(self) -> np.ndarray:
        # k * dt with dt stored once; no running accumulation
        return np.arange(self.n_points, dtype=np.float64) * self.dt

    def index_of(self, t: float) -> int:
        """Nearest grid index to ``t``; raises if ``t`` is outside [0, horizon]."""
        tol = 0.5 * self.dt
        if not (-tol <= t <= self.horizon + tol) or not math.isfinite(t):
            raise ConfigurationError(f"time {t} outside grid range [0, {self.horizon}]")
        return min(self.n_steps, max(0, int(round(t / self.dt))))

    def steps_for(self, delta: float) -> int | None:
        """Integer j with delta == j * dt (to 1e-9 relative), else None."""
        j = delta / self.dt
        jr = round(j)
        if jr >= 1 and abs(j - jr) <= 1e-9 * max(1.0, jr):
            return int(jr)
        return None


def make_grid(n_steps: int, horizon: float = 1.0) -> TimeGrid:
    if isinstance(n_steps, bool) or int(n_steps) != n_steps or n_steps < 1:
        raise ConfigurationError(f"n_steps must be a positive integer, got {n_steps!r}")
    horizon = float(horizon)
    if not math.isfinite(horizon) or horizon <= 0:
        raise ConfigurationError(f"horizon must be finite and positive, got {horizon!r}")
    n_steps = int(n_steps)
    return TimeGrid(n_steps=n_steps, dt=horizon / n_steps, horizon=horizon)
