"""Exception hierarchy.  The CLI maps these onto exit codes."""

from __future__ import annotations


class ZitterwalkError(Exception):
    """Base class for every error raised by the package."""


class ConfigurationError(ZitterwalkError, ValueError):
    """Invalid parameters or run configuration (CLI exit code 2)."""


class InsufficientSampleError(ZitterwalkError, ValueError):
    """Too few samples for the requested statistic."""


class InsufficientDataError(ZitterwalkError, ValueError):
    """An estimator has nothing it can determine from its input."""


class ResolutionError(ZitterwalkError, ValueError):
    """The data is stored too coarsely for the requested operation."""


class NumericDomainError(ZitterwalkError, ArithmeticError):
    """A coefficient evaluation produced a non-finite value."""

    def __init__(self, message: str, t: float | None = None, x: float | None = None,
                 step: int | None = None, path_id: int | None = None):
        self.t = t
        self.x = x
        self.step = step
        self.path_id = path_id
        super().__init__(message)


class DegenerateVolatilityError(NumericDomainError):
    """Volatility evaluated to a non-positive value."""
