"""Reproducible equiprobable +-1 noise and its diagnostics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigurationError, InsufficientSampleError
from .philox import rademacher_matrix

MAX_LAG = 10


@dataclass(frozen=True)
class NoiseStream:
    """Rademacher noise keyed on (seed, path_id).

    The value at step ``k`` is a pure function of ``(seed, path_id, k)``;
    ``position`` is only the default starting step for :meth:`take`.
    """

    seed: int
    path_id: int = 0
    position: int = 0

    def take(self, n: int, start: int | None = None) -> np.ndarray:
        start = self.position if start is None else start
        if start < 0 or n < 0:
            raise ConfigurationError("step indices must be non-negative")
        return rademacher_matrix(self.seed, [self.path_id], start, n)[:, 0]

    def at(self, position: int) -> "NoiseStream":
        return NoiseStream(self.seed, self.path_id, position)


def rademacher(stream: NoiseStream, k: int) -> int:
    if k < 0:
        raise ConfigurationError(f"step index must be non-negative, got {k}")
    return int(stream.take(1, start=k)[0])


def _autocorrelations(e: np.ndarray, max_lag: int) -> list[float]:
    d = e - e.mean()
    denom = float(np.dot(d, d))
    if denom == 0.0:
        return [math.nan] * max_lag
    return [float(np.dot(d[:-lag], d[lag:]) / denom) for lag in range(1, max_lag + 1)]


@dataclass
class NoiseBiasReport:
    n: int
    p_plus: float
    mean: float
    chi_square: float
    chi_square_p: float
    autocorrelations: list[float]
    bound: float = field(init=False)

    def __post_init__(self):
        self.bound = 4.0 / math.sqrt(self.n)

    @property
    def fair(self) -> bool:
        return abs(self.mean) <= self.bound

    @property
    def chi_square_ok(self) -> bool:
        return 0.001 < self.chi_square_p < 0.999

    @property
    def uncorrelated(self) -> bool:
        return all(abs(r) <= self.bound for r in self.autocorrelations)

    @property
    def passed(self) -> bool:
        return self.fair and self.chi_square_ok and self.uncorrelated

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(fair=self.fair, chi_square_ok=self.chi_square_ok,
                 uncorrelated=self.uncorrelated, passed=self.passed)
        return d


def noise_bias_report(source, n: int) -> NoiseBiasReport:
    """Frequency, chi-square and lag 1..10 autocorrelation of ``n`` draws.

    ``source`` is a :class:`NoiseStream` or an explicit sequence of +-1
    values (of which the first ``n`` are used).
    """
    if n < 100:
        raise InsufficientSampleError(f"noise_bias_report needs n >= 100, got {n}")
    if isinstance(source, NoiseStream):
        e = source.take(n)
    else:
        e = np.asarray(source, dtype=np.float64)[:n]
        if e.size < n:
            raise InsufficientSampleError(f"source has {e.size} values, {n} requested")
        if not np.all(np.abs(e) == 1.0):
            raise ConfigurationError("noise values must be exactly +1 or -1")
    n_plus = int(np.count_nonzero(e > 0))
    observed = np.array([n_plus, n - n_plus], dtype=np.float64)
    expected = n / 2.0
    chi2 = float(((observed - expected) ** 2 / expected).sum())
    return NoiseBiasReport(
        n=n,
        p_plus=n_plus / n,
        mean=float(e.mean()),
        chi_square=chi2,
        chi_square_p=float(stats.chi2.sf(chi2, df=1)),
        autocorrelations=_autocorrelations(e, MAX_LAG),
    )


def cross_correlation(a: NoiseStream, b: NoiseStream, n: int) -> float:
    """Pearson correlation of two streams over their first ``n`` steps."""
    x = a.take(n)
    y = b.take(n)
    return float(np.corrcoef(x, y)[0, 1])
