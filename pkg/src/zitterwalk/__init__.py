"""Simulation and verification of the +-1 random walk
x(t + dt) = x(t) + b(t, x) dt + sigma(t, x) eps(t) sqrt(dt)."""

from __future__ import annotations

import os

# OpenMP first: avoids probing an outdated TBB runtime on import of the kernels
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp tbb workqueue")

import numba  # noqa: E402

# numba may have been imported (and configured) before this package
numba.config.THREADING_LAYER_PRIORITY = os.environ["NUMBA_THREADING_LAYER_PRIORITY"].split()

from .errors import (ConfigurationError, DegenerateVolatilityError, InsufficientDataError,  # noqa: E402
                     InsufficientSampleError, NumericDomainError, ResolutionError, ZitterwalkError)
from .grid import TimeGrid, make_grid  # noqa: E402
from .noise import NoiseStream, cross_correlation, noise_bias_report, rademacher  # noqa: E402
from .fields import (CoefficientField, PhysicalScale, builtin_field, constant_field,  # noqa: E402
                     expression_field, history_field, user_field)
from .walker import (Ensemble, Path, X0Spec, configure_threads, simulate_ensemble,  # noqa: E402
                     simulate_path, step)
from .estimator import (DecompositionEstimate, HeisenbergReport, MarkovReport,  # noqa: E402
                        estimate_decomposition, heisenberg_check, heisenberg_ensemble,
                        markov_diagnostic, regress_drift, residual_moments, residuals)
from .equivalence import (ComparisonReport, StabilityReport, calibrate_ks_threshold,  # noqa: E402
                          equivalence_report, gaussian_reference, ks_distance, stability_check,
                          wasserstein1)
from .fractal import DimensionEstimate, estimate_dimension, mean_increment  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "CoefficientField", "ComparisonReport", "ConfigurationError", "DecompositionEstimate",
    "DegenerateVolatilityError", "DimensionEstimate", "Ensemble", "HeisenbergReport",
    "InsufficientDataError", "InsufficientSampleError", "MarkovReport", "NoiseStream",
    "NumericDomainError", "Path", "PhysicalScale", "ResolutionError", "StabilityReport", "TimeGrid",
    "X0Spec", "ZitterwalkError", "builtin_field", "calibrate_ks_threshold", "configure_threads",
    "constant_field", "cross_correlation", "equivalence_report", "estimate_decomposition",
    "estimate_dimension", "expression_field", "gaussian_reference", "heisenberg_check",
    "heisenberg_ensemble", "history_field", "ks_distance", "make_grid", "markov_diagnostic",
    "mean_increment", "noise_bias_report", "rademacher", "regress_drift", "residual_moments",
    "residuals", "simulate_ensemble", "simulate_path", "stability_check", "step", "user_field",
    "wasserstein1",
]
