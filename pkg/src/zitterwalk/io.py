"""Ensemble files and report emission.

ZWLK binary layout (all little-endian)::

    offset  type      field
    0       4 bytes   magic "ZWLK"
    4       uint16    format version (1)
    6       uint16    flags: bit 0 Gaussian noise, bit 1 seed present
    8       uint64    n_rows (stored grid points = n_steps // stride + 1)
    16      uint64    n_paths
    24      uint64    n_steps
    32      uint64    stride
    40      float64   dt
    48      float64   horizon
    56      uint64    seed (two's complement for negative seeds)
    64      int64[n_paths]           path_id column
    ...     float64[n_rows, n_paths] x column, time-major (row k is t = k * stride * dt)
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path as FsPath

import numpy as np

from .errors import ConfigurationError
from .grid import TimeGrid
from .walker import Ensemble

MAGIC = b"ZWLK"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHHQQQQddQ")
FLAG_GAUSSIAN = 1
FLAG_SEED = 2


def write_ensemble(ensemble: Ensemble, path, stride: int | None = None) -> FsPath:
    """Write ``ensemble`` (every ``stride``-th grid point) in the ZWLK layout."""
    path = FsPath(path)
    grid = ensemble.grid
    stride = ensemble.stride if stride is None else int(stride)
    if stride < 1 or grid.n_steps % stride or stride % ensemble.stride:
        raise ConfigurationError(f"stride {stride} must divide n_steps and be a multiple of "
                                 f"the storage stride {ensemble.stride}")
    n_rows = grid.n_steps // stride + 1
    flags = (FLAG_GAUSSIAN if ensemble.noise == "gaussian" else 0) | (FLAG_SEED if ensemble.seed is not None else 0)
    seed = (int(ensemble.seed) & 0xFFFFFFFFFFFFFFFF) if ensemble.seed is not None else 0
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, flags, n_rows, ensemble.n_paths, grid.n_steps,
                             stride, grid.dt, grid.horizon, seed))
        fh.write(np.asarray(ensemble.path_ids, dtype="<i8").tobytes())
        if ensemble.stored is not None:
            rows = ensemble.stored[:: stride // ensemble.stride]
            fh.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())
        else:
            fh.write(np.asarray(ensemble.initial_values(), dtype="<f8").tobytes())
            for k0, block in ensemble.iter_chunks():
                first = (k0 // stride + 1) * stride
                idx = np.arange(first, k0 + block.shape[0], stride) - k0
                if idx.size:
                    fh.write(np.ascontiguousarray(block[idx], dtype="<f8").tobytes())
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise ConfigurationError(f"{path}: file too short for a ZWLK header")
    magic, version, flags, n_rows, n_paths, n_steps, stride, dt, horizon, seed = HEADER.unpack(raw)
    if magic != MAGIC:
        raise ConfigurationError(f"{path}: not a ZWLK file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported ZWLK version {version}")
    if stride < 1 or n_steps % stride or n_rows != n_steps // stride + 1:
        raise ConfigurationError(f"{path}: inconsistent header (rows {n_rows}, steps {n_steps}, stride {stride})")
    if seed >= 2**63:
        seed -= 2**64
    return {
        "version": version,
        "noise": "gaussian" if flags & FLAG_GAUSSIAN else "rademacher",
        "n_rows": n_rows,
        "n_paths": n_paths,
        "n_steps": n_steps,
        "stride": stride,
        "dt": dt,
        "horizon": horizon,
        "seed": seed if flags & FLAG_SEED else None,
    }


def read_ensemble(path) -> Ensemble:
    """Memory-map a ZWLK file as a stored ensemble."""
    h = read_header(path)
    expected = HEADER.size + 8 * h["n_paths"] * (1 + h["n_rows"])
    size = FsPath(path).stat().st_size
    if size != expected:
        raise ConfigurationError(f"{path}: size {size} does not match header (expected {expected})")
    ids = np.fromfile(path, dtype="<i8", count=h["n_paths"], offset=HEADER.size)
    x = np.memmap(path, dtype="<f8", mode="r", offset=HEADER.size + 8 * h["n_paths"],
                  shape=(h["n_rows"], h["n_paths"]))
    grid = TimeGrid(h["n_steps"], h["dt"], h["horizon"])
    ens = Ensemble(grid, h["n_paths"], seed=h["seed"], noise=h["noise"], path_ids=ids,
                   stride=h["stride"], stored=x)
    return ens


def write_ensemble_csv(ensemble: Ensemble, path) -> FsPath:
    """One row per (path, stored grid point): path_id, t, x."""
    path = FsPath(path)
    vals = ensemble.values
    t = np.arange(vals.shape[0]) * (ensemble.stride * ensemble.grid.dt)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "t", "x"])
        for i, pid in enumerate(ensemble.path_ids):
            for tk, xk in zip(t, vals[:, i]):
                w.writerow([int(pid), repr(float(tk)), repr(float(xk))])
    return path


# -- reports ------------------------------------------------------------------------

def clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path, payload: dict) -> FsPath:
    path = FsPath(path)
    text = json.dumps(clean(payload), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n")
    return path


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else ""
    return v


def write_csv(path, header, rows) -> FsPath:
    path = FsPath(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path
