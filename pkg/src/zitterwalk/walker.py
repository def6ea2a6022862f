"""Simulation of the walk x(t + dt) = x(t) + b(t, x) dt + sigma(t, x) eps(t) sqrt(dt).

Coefficients are always evaluated at the left end of a step, and every route
(scalar :func:`step`, the compiled affine kernel, the vectorised user-field
loop) performs the same floating-point operations in the same order, so a
path does not depend on which route produced it.

Ensembles are stored time-major: ``values[k, i]`` is path ``i`` at ``t_k``.
An ensemble too large for memory is kept *lazy*: it holds its recipe and
regenerates chunks of time steps on demand.  Since the noise is counter
based, regeneration is bitwise identical to the first pass.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field as dc_field
from typing import Iterator, Sequence

import numba as nb
import numpy as np

from .errors import (ConfigurationError, DegenerateVolatilityError,
                     NumericDomainError, ResolutionError)
from .fields import CoefficientField
from .grid import TimeGrid
from .noise import NoiseStream
from .philox import (DOMAIN_GAUSSIAN, DOMAIN_RADEMACHER, _block, as_ids, as_u64, gaussian_matrix,
                     gaussian_row, rademacher_matrix, rademacher_row,
                     x0_uniforms)

TILE = 64
_DOM_RAD = np.uint64(DOMAIN_RADEMACHER)
_ONE = np.uint64(1)
# a generated chunk should stay cache-resident while every consumer reads it
CHUNK_BYTES = 2**20
AUTO_DENSE_BYTES = 256 * 2**20
NOISE_KINDS = ("rademacher", "gaussian")


def configure_threads(n: int | None = None) -> int:
    """Cap the kernel worker count (``ZITTERWALK_THREADS`` when ``n`` is None).

    Results never depend on this number; it only affects speed.
    """
    if n is None:
        env = os.environ.get("ZITTERWALK_THREADS")
        n = int(env) if env else nb.config.NUMBA_NUM_THREADS
    n = max(1, min(int(n), nb.config.NUMBA_NUM_THREADS))
    nb.set_num_threads(n)
    return n


def step(x: float, t: float, field: CoefficientField, eps: float, dt: float,
         prev: float = 0.0) -> float:
    """One step of the walk with coefficients taken at (t, x)."""
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    if eps not in (1, -1):
        raise ConfigurationError(f"eps must be +1 or -1, got {eps}")
    b, s = field.evaluate(t, x, prev)
    b = float(b)
    s = float(s)
    _check_coefficients(b, s, t, x)
    return x + b * dt + s * eps * math.sqrt(dt)


def _check_coefficients(b, s, t, x, step_index=None, path_id=None):
    where = f" at step {step_index}" if step_index is not None else ""
    if path_id is not None:
        where += f", path {path_id}"
    if not (math.isfinite(b) and math.isfinite(s)):
        raise NumericDomainError(f"non-finite coefficient (b={b}, sigma={s}) at t={t}, x={x}{where}",
                                 t=t, x=x, step=step_index, path_id=path_id)
    if s <= 0:
        raise DegenerateVolatilityError(f"volatility {s} <= 0 at t={t}, x={x}{where}",
                                        t=t, x=x, step=step_index, path_id=path_id)


# -- initial conditions -------------------------------------------------------

@dataclass(frozen=True)
class X0Spec:
    """Distribution of x(0): ``point``, ``normal`` or ``uniform``.

    Draws come from a counter domain disjoint from every noise stream.
    """

    kind: str = "point"
    value: float = 0.0
    mean: float = 0.0
    std: float = 1.0
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        if self.kind not in ("point", "normal", "uniform"):
            raise ConfigurationError(f"unknown x0 kind {self.kind!r}")
        nums = (self.value, self.mean, self.std, self.low, self.high)
        if not all(math.isfinite(v) for v in nums):
            raise ConfigurationError("x0 parameters must be finite")
        if self.kind == "normal" and self.std < 0:
            raise ConfigurationError("x0 std must be non-negative")
        if self.kind == "uniform" and not self.low <= self.high:
            raise ConfigurationError("x0 uniform needs low <= high")

    @classmethod
    def parse(cls, spec) -> "X0Spec":
        if isinstance(spec, X0Spec):
            return spec
        if spec is None:
            return cls()
        if isinstance(spec, (int, float)) and not isinstance(spec, bool):
            return cls(kind="point", value=float(spec))
        if isinstance(spec, dict):
            allowed = {"kind", "value", "mean", "std", "low", "high"}
            unknown = set(spec) - allowed
            if unknown:
                raise ConfigurationError(f"unknown x0 keys: {sorted(unknown)}")
            return cls(**{k: (float(v) if k != "kind" else v) for k, v in spec.items()})
        raise ConfigurationError(f"cannot interpret x0 spec {spec!r}")

    def sample(self, seed: int, path_ids) -> np.ndarray:
        ids = as_ids(path_ids)
        if self.kind == "point":
            return np.full(ids.shape[0], self.value)
        u = x0_uniforms(seed, ids)
        if self.kind == "uniform":
            return self.low + (self.high - self.low) * u[:, 0]
        z = np.sqrt(-2.0 * np.log(u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        return self.mean + self.std * z

    def to_dict(self) -> dict:
        if self.kind == "point":
            return {"kind": "point", "value": self.value}
        if self.kind == "normal":
            return {"kind": "normal", "mean": self.mean, "std": self.std}
        return {"kind": "uniform", "low": self.low, "high": self.high}


# -- compiled kernels ---------------------------------------------------------

@nb.njit(parallel=True, cache=True)
def _advance_affine(out, k0, dt, sqdt, b0, b1, s0, seed, ids, gaussian, words, cached):
    """Fill rows 1..T of ``out`` from row 0; one tile of paths per task.

    Noise is produced in segments that end on a Philox block boundary, so a
    tile's noise stays in cache while it is consumed.  ``words`` (4, n)
    keeps each path's current Rademacher block between calls; ``cached[0]``
    is that block's index (-1 for none).
    """
    T = out.shape[0] - 1
    n = out.shape[1]
    ntiles = (n + TILE - 1) // TILE
    span = 256
    for tile in nb.prange(ntiles):
        lo = tile * TILE
        hi = min(n, lo + TILE)
        m = hi - lo
        x = out[0, lo:hi].copy()
        noise = np.empty((m, span))
        j = 0
        while j < T:
            k = k0 + j
            seg = min(T - j, span - (k % span))
            if gaussian:
                for ii in range(m):
                    gaussian_row(seed, ids[lo + ii], k, noise[ii, :seg], DOMAIN_GAUSSIAN)
                for jj in range(seg):
                    dst = out[j + jj + 1]
                    for ii in range(m):
                        xi = x[ii]
                        xi = xi + (b0 + b1 * xi) * dt + (s0 * noise[ii, jj]) * sqdt
                        x[ii] = xi
                        dst[lo + ii] = xi
            else:
                if (k >> 8) != cached[0]:
                    blk = np.uint64(k >> 8)
                    for ii in range(lo, hi):
                        w0, w1, w2, w3 = _block(seed, ids[ii], blk, _DOM_RAD)
                        words[0, ii] = w0
                        words[1, ii] = w1
                        words[2, ii] = w2
                        words[3, ii] = w3
                b = k & 255
                for jj in range(seg):
                    src = words[(b + jj) >> 6, lo:hi]
                    sh = np.uint64((b + jj) & 63)
                    dst = out[j + jj + 1]
                    for ii in range(m):
                        eps = np.float64((src[ii] >> sh) & _ONE) * 2.0 - 1.0
                        xi = x[ii]
                        xi = xi + (b0 + b1 * xi) * dt + (s0 * eps) * sqdt
                        x[ii] = xi
                        dst[lo + ii] = xi
            j += seg
    if not gaussian and T > 0:
        cached[0] = (k0 + T - 1) >> 8


@nb.njit(cache=True)
def _advance_affine_explicit(out, noise, dt, sqdt, b0, b1, s0):
    T = out.shape[0] - 1
    n = out.shape[1]
    for j in range(T):
        for i in range(n):
            xi = out[j, i]
            out[j + 1, i] = xi + (b0 + b1 * xi) * dt + (s0 * noise[j, i]) * sqdt


def _first_nonfinite(block: np.ndarray) -> tuple[int, int]:
    bad = ~np.isfinite(block)
    j = int(np.argmax(bad.any(axis=1)))
    i = int(np.argmax(bad[j]))
    return j, i


# -- containers -----------------------------------------------------------------

@dataclass
class Path:
    grid: TimeGrid
    values: np.ndarray
    path_id: int = 0
    stride: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = self.grid.n_steps // self.stride + 1
        if self.values.shape != (expected,):
            raise ConfigurationError(f"path needs {expected} values, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NumericDomainError("path contains non-finite values", path_id=self.path_id)

    @property
    def dense(self) -> bool:
        return self.stride == 1

    def times(self) -> np.ndarray:
        return np.arange(self.values.shape[0]) * (self.stride * self.grid.dt)

    def increments(self) -> np.ndarray:
        if not self.dense:
            raise ResolutionError(f"path is thinned (stride {self.stride}); increments need every point")
        return np.diff(self.values)


@dataclass
class Ensemble:
    """A set of paths on one grid, either stored or regenerable from its recipe.

    ``values`` (when present) is time-major with shape
    ``(n_steps // stride + 1, n_paths)``.
    """

    grid: TimeGrid
    n_paths: int
    field: CoefficientField | None = None
    seed: int | None = None
    x0: X0Spec = dc_field(default_factory=X0Spec)
    noise: str = "rademacher"
    path_ids: np.ndarray | None = None
    stride: int = 1
    stored: np.ndarray | None = dc_field(default=None, repr=False)

    def __post_init__(self):
        if self.n_paths < 1:
            raise ConfigurationError("an ensemble needs at least one path")
        if self.noise not in NOISE_KINDS:
            raise ConfigurationError(f"unknown noise kind {self.noise!r}")
        if self.path_ids is None:
            self.path_ids = np.arange(self.n_paths, dtype=np.int64)
        self.path_ids = np.asarray(self.path_ids, dtype=np.int64)
        if self.path_ids.shape != (self.n_paths,) or np.unique(self.path_ids).size != self.n_paths:
            raise ConfigurationError("path_ids must be distinct, one per path")
        if self.stride < 1 or self.grid.n_steps % self.stride:
            raise ConfigurationError(f"stride {self.stride} must divide n_steps {self.grid.n_steps}")
        if self.stored is None and (self.field is None or self.seed is None):
            raise ConfigurationError("an ensemble needs stored values or a (field, seed) recipe")
        if self.stored is None and self.stride != 1:
            raise ConfigurationError("lazy ensembles are always full resolution")
        if self.stored is not None:
            shape = (self.grid.n_steps // self.stride + 1, self.n_paths)
            if self.stored.shape != shape:
                raise ConfigurationError(f"stored values have shape {self.stored.shape}, expected {shape}")

    @classmethod
    def from_values(cls, values, grid: TimeGrid, path_ids=None, stride: int = 1,
                    field: CoefficientField | None = None, seed: int | None = None) -> "Ensemble":
        """Wrap an explicit time-major array (rows are grid points)."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        return cls(grid=grid, n_paths=values.shape[1], field=field, seed=seed,
                   path_ids=path_ids, stride=stride, stored=values)

    @property
    def dense(self) -> bool:
        return self.stride == 1

    @property
    def lazy(self) -> bool:
        return self.stored is None

    @property
    def values(self) -> np.ndarray:
        if self.stored is None:
            self.stored = self._collect(np.arange(self.grid.n_points))
        return self.stored

    def storage(self) -> str:
        if self.lazy:
            return "lazy"
        return "dense" if self.dense else "thinned"

    def describe(self) -> dict:
        return {
            "n_paths": self.n_paths,
            "n_steps": self.grid.n_steps,
            "horizon": self.grid.horizon,
            "seed": self.seed,
            "noise": self.noise,
            "storage": self.storage(),
            "stride": self.stride,
            "field": self.field.describe() if self.field is not None else None,
            "x0": self.x0.to_dict(),
        }

    def initial_values(self) -> np.ndarray:
        if self.stored is not None:
            return self.stored[0].copy()
        return self.x0.sample(self.seed, self.path_ids)

    # -- traversal ------------------------------------------------------------

    def chunk_steps(self) -> int:
        # multiples of 16 steps keep paired Gaussian Philox blocks whole
        steps = max(16, min(4096, CHUNK_BYTES // (8 * self.n_paths)) // 16 * 16)
        return int(min(steps, self.grid.n_steps))

    def iter_chunks(self, steps: int | None = None,
                    reuse: bool = False) -> Iterator[tuple[int, np.ndarray]]:
        """Yield ``(k0, block)`` with ``block[j] = x(t_{k0 + j})`` for j = 0..T.

        Consecutive blocks share their boundary row.  Requires full resolution.
        With ``reuse`` a lazy ensemble refills one buffer, so a block is only
        valid until the next one is requested.
        """
        if not self.dense:
            raise ResolutionError(f"ensemble is thinned (stride {self.stride}); every increment is required")
        steps = steps or self.chunk_steps()
        n = self.grid.n_steps
        if self.stored is not None:
            for k0 in range(0, n, steps):
                yield k0, self.stored[k0:min(n, k0 + steps) + 1]
            return
        yield from _generate(self, steps, reuse)

    def at_indices(self, indices: Sequence[int]) -> np.ndarray:
        """Values at the given grid indices, shape (len(indices), n_paths)."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() > self.grid.n_steps):
            raise ConfigurationError("grid index out of range")
        if self.stored is not None:
            if np.any(idx % self.stride):
                raise ResolutionError(f"indices must be multiples of the storage stride {self.stride}")
            return self.stored[idx // self.stride]
        return self._collect(idx)

    def _collect(self, idx: np.ndarray) -> np.ndarray:
        uniq, inverse = np.unique(idx, return_inverse=True)
        out = np.empty((uniq.size, self.n_paths))
        pos = 0
        # nothing else reads these blocks, so longer ones only save per-chunk overhead
        for k0, block in self.iter_chunks(max(self.chunk_steps(), 64), reuse=True):
            end = int(np.searchsorted(uniq, k0 + block.shape[0] - 1, side="right"))
            out[pos:end] = block[uniq[pos:end] - k0]
            pos = end
            if pos == uniq.size:
                break
        return out[inverse]

    def final_values(self) -> np.ndarray:
        return self.at_indices([self.grid.n_steps])[0]

    def path(self, i: int) -> Path:
        vals = self.values[:, i] if self.stored is not None else self.at_indices(np.arange(self.grid.n_points))[:, i]
        return Path(self.grid, np.ascontiguousarray(vals), int(self.path_ids[i]), self.stride)

    def materialize(self, stride: int = 1) -> "Ensemble":
        """A stored copy (every ``stride``-th grid point)."""
        idx = np.arange(0, self.grid.n_points, stride)
        if self.stored is not None and stride == self.stride:
            return self
        vals = self.at_indices(idx)
        return Ensemble(self.grid, self.n_paths, self.field, self.seed, self.x0, self.noise,
                        self.path_ids.copy(), stride, vals)


def _generate(ens: Ensemble, steps: int, reuse: bool = False) -> Iterator[tuple[int, np.ndarray]]:
    grid = ens.grid
    n, dt, sqdt = grid.n_steps, grid.dt, grid.sqrt_dt
    field = ens.field
    x = ens.x0.sample(ens.seed, ens.path_ids)
    affine = field.affine
    if affine is not None:
        b0, b1, s0 = affine
        _check_coefficients(b0, s0, 0.0, float(x[0]), 0, int(ens.path_ids[0]))
        if not math.isfinite(b1):
            raise NumericDomainError(f"non-finite drift slope {b1}")
    ids = as_ids(ens.path_ids)
    seed = as_u64(ens.seed)
    prev = np.zeros(ens.n_paths)
    words = np.empty((4, ens.n_paths), dtype=np.uint64)
    cached = np.full(1, -1, dtype=np.int64)
    buf = None
    for k0 in range(0, n, steps):
        T = min(steps, n - k0)
        if not reuse or buf is None:
            buf = np.empty((min(steps, n) + 1, ens.n_paths))
        block = buf[:T + 1]
        block[0] = x
        if affine is not None:
            _advance_affine(block, k0, dt, sqdt, b0, b1, s0, seed, ids, ens.noise == "gaussian",
                            words, cached)
            if not np.isfinite(block[-1]).all():
                j, i = _first_nonfinite(block)
                raise NumericDomainError(
                    f"walk left the finite range at step {k0 + j - 1}, path {int(ens.path_ids[i])}",
                    t=grid.time(k0 + j - 1), x=float(block[j - 1, i]), step=k0 + j - 1,
                    path_id=int(ens.path_ids[i]))
        else:
            if ens.noise == "gaussian":
                noise = gaussian_matrix(ens.seed, ids, k0, T)
            else:
                noise = rademacher_matrix(ens.seed, ids, k0, T)
            prev = _advance_user(block, noise, field, k0, grid, prev, ens.path_ids)
        x = block[-1].copy()
        yield k0, block


def _advance_user(block, noise, field, k0, grid, prev, path_ids):
    dt, sqdt = grid.dt, grid.sqrt_dt
    for j in range(noise.shape[0]):
        k = k0 + j
        t = grid.time(k)
        xj = block[j]
        b, s = field.evaluate(t, xj, prev)
        ok_b = np.isfinite(b)
        ok_s = np.isfinite(s)
        if not (ok_b.all() and ok_s.all() and (s > 0).all()):
            i = int(np.argmax(~(ok_b & ok_s & (s > 0))))
            _check_coefficients(float(b[i]), float(s[i]), t, float(xj[i]), k, int(path_ids[i]))
        nxt = xj + b * dt + s * noise[j] * sqdt
        if not np.isfinite(nxt).all():
            i = int(np.argmax(~np.isfinite(nxt)))
            raise NumericDomainError(f"walk left the finite range at step {k}, path {int(path_ids[i])}",
                                     t=t, x=float(xj[i]), step=k, path_id=int(path_ids[i]))
        block[j + 1] = nxt
        prev = nxt - xj
    return prev


# -- public operations ----------------------------------------------------------

def simulate_path(field: CoefficientField, x0: float, grid: TimeGrid, stream) -> Path:
    """Walk from ``x0`` driven by ``stream``.

    ``stream`` is a :class:`NoiseStream` or an explicit sequence of
    ``n_steps`` values in {+1, -1}.
    """
    x0 = float(x0)
    if not math.isfinite(x0):
        raise ConfigurationError(f"x0 must be finite, got {x0}")
    if isinstance(stream, NoiseStream):
        if stream.position:
            eps = stream.take(grid.n_steps)
            return simulate_path(field, x0, grid, eps)
        ens = Ensemble(grid, 1, field=field, seed=stream.seed, x0=X0Spec("point", x0),
                       path_ids=np.array([stream.path_id]))
        return ens.path(0)
    eps = np.asarray(stream, dtype=np.float64)
    if eps.shape != (grid.n_steps,):
        raise ConfigurationError(f"need {grid.n_steps} noise values, got shape {eps.shape}")
    if not np.all(np.abs(eps) == 1.0):
        raise ConfigurationError("noise values must be exactly +1 or -1")
    block = np.empty((grid.n_points, 1))
    block[0, 0] = x0
    noise = eps[:, None]
    affine = field.affine
    if affine is not None:
        b0, b1, s0 = affine
        _check_coefficients(b0, s0, 0.0, x0, 0)
        _advance_affine_explicit(block, noise, grid.dt, grid.sqrt_dt, b0, b1, s0)
        if not np.isfinite(block).all():
            j, _ = _first_nonfinite(block)
            raise NumericDomainError(f"walk left the finite range at step {j - 1}",
                                     t=grid.time(j - 1), x=float(block[j - 1, 0]), step=j - 1)
    else:
        _advance_user(block, noise, field, 0, grid, np.zeros(1), np.array([0]))
    return Path(grid, block[:, 0], 0)


def simulate_ensemble(field: CoefficientField, x0_sampler, grid: TimeGrid, n_paths: int,
                      seed: int, storage: str = "auto", stride: int = 1,
                      noise: str = "rademacher") -> Ensemble:
    """``n_paths`` independent walks; path ``i`` is driven by ``NoiseStream(seed, i)``.

    ``storage`` is ``dense`` (every point in memory), ``thinned`` (every
    ``stride``-th point), ``lazy`` (regenerated on each traversal) or ``auto``
    (dense when it fits in AUTO_DENSE_BYTES, lazy otherwise).
    """
    if isinstance(n_paths, bool) or int(n_paths) != n_paths or n_paths < 1:
        raise ConfigurationError(f"n_paths must be a positive integer, got {n_paths!r}")
    ens = Ensemble(grid, int(n_paths), field=field, seed=int(seed), x0=X0Spec.parse(x0_sampler),
                   noise=noise)
    if storage == "auto":
        storage = "dense" if 8 * n_paths * grid.n_points <= AUTO_DENSE_BYTES else "lazy"
    if storage == "lazy":
        return ens
    if storage == "dense":
        return ens.materialize(1)
    if storage == "thinned":
        if stride < 1 or grid.n_steps % stride:
            raise ConfigurationError(f"stride {stride} must divide n_steps {grid.n_steps}")
        return ens.materialize(stride)
    raise ConfigurationError(f"unknown storage mode {storage!r}")
