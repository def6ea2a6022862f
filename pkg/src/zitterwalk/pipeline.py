"""Batch orchestration: one simulation, one fused traversal, one report per analysis."""

from __future__ import annotations

import logging
import math
import time
from datetime import datetime, timezone
from pathlib import Path as FsPath

import numpy as np

from . import io
from .config import RunConfig
from .equivalence import (calibrate_ks_threshold, equivalence_report, gaussian_reference,
                          gaussian_reference_marginals, marginal_indices, stability_check, _spawn_seed)
from .errors import ConfigurationError, InsufficientDataError
from .estimator import (DecompositionScan, HeisenbergScan, MarkovScan, regress_drift,
                        residual_moments, scan)
from .fractal import (IncrementScan, MIN_DECADES, MIN_SCALES, fit_dimension, increment_sums,
                      valid_scale_steps)
from .noise import NoiseStream, noise_bias_report
from .schemas import SCHEMA_VERSION
from .walker import Ensemble, configure_threads, simulate_ensemble

log = logging.getLogger("zitterwalk")

PASS, FAIL, UNDETERMINED = "pass", "fail", "undetermined"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
STABILITY_CSV_ROWS = 1000


class RowScan:
    """Collects the rows of chosen grid indices during a traversal."""

    def __init__(self, indices):
        self.indices = [int(k) for k in indices]

    def begin(self, ens: Ensemble):
        self.rows = np.empty((len(self.indices), ens.n_paths))
        x0 = ens.initial_values()
        for r, k in enumerate(self.indices):
            if k == 0:
                self.rows[r] = x0

    def update(self, k0: int, block: np.ndarray):
        hi = k0 + block.shape[0] - 1
        for r, k in enumerate(self.indices):
            if k0 < k <= hi:
                self.rows[r] = block[k - k0]

    def finish(self) -> np.ndarray:
        return self.rows


def _doc(name: str, verdict: str, body: dict) -> dict:
    out = {"schema_version": SCHEMA_VERSION, "report": name, "verdict": verdict, "pass": verdict == PASS}
    out.update(body)
    return out


def exit_code(verdicts: dict) -> int:
    return EXIT_FAIL if any(v == FAIL for v in verdicts.values()) else EXIT_OK


def build_ensemble(cfg: RunConfig) -> Ensemble:
    storage = cfg.storage
    return simulate_ensemble(cfg.field(), cfg.x0_spec, cfg.grid, cfg.n_paths, cfg.seed,
                             storage=storage, stride=cfg.ensemble_stride)


def _fractal_steps(cfg: RunConfig, ens: Ensemble):
    scales = [m * ens.grid.dt for m in cfg.fractal_scales]
    steps, rejected = valid_scale_steps(ens, scales)
    if len(steps) < MIN_SCALES:
        raise ConfigurationError(f"key 'fractal_scales': need at least {MIN_SCALES} valid scales "
                                 f"for n_steps = {ens.grid.n_steps}, got {len(steps)} (rejected: {rejected})")
    if math.log10(steps[-1] / steps[0]) < MIN_DECADES - 1e-12:
        raise ConfigurationError(f"key 'fractal_scales': valid scales must span {MIN_DECADES} decades")
    return steps, rejected


# -- per-analysis reports -----------------------------------------------------------

def heisenberg_doc(report) -> dict:
    body = report.to_dict()
    body.pop("pass", None)
    return _doc("heisenberg", PASS if report.passed else FAIL, body)


def decompose_doc(est, cfg: RunConfig, method: str) -> dict:
    body = {"method": method, "window": est.window, "n_xbins": est.n_xbins, "min_count": est.min_count,
            "cells": est.summary()}
    if not est.determined.any():
        body.update(drift_regression=None, residual_moments={"determined_cells": 0, "pass": False})
        return _doc("decompose", UNDETERMINED, body)
    moments = residual_moments(est)
    try:
        reg = regress_drift(est).to_dict()
    except InsufficientDataError:
        reg = None
    body.update(drift_regression=reg, residual_moments=moments.summary())
    return _doc("decompose", PASS if moments.passed else FAIL, body)


def decompose_rows(est):
    for w in range(est.count.shape[0]):
        for b in range(est.n_xbins):
            yield (float(est.t_start[w]), b, float(est.center[w, b]), int(est.count[w, b]),
                   float(est.drift[w, b]), float(est.volatility[w, b]), float(est.eta_mean[w, b]),
                   float(est.eta_sq_mean[w, b]), int(bool(est.determined[w, b])))


def markov_doc(report) -> dict:
    verdict = {"markov_consistent": PASS, "non_markov": FAIL}.get(report.verdict, UNDETERMINED)
    # "verdict" keeps the diagnostic's own three-way wording
    return _doc("markov", verdict, report.to_dict())


def markov_rows(report, window: int, dt: float):
    if report.z_mean is None:
        return
    for w, b in zip(*np.nonzero(np.isfinite(report.z_mean))):
        yield (float(w * window * dt), int(b), float(report.z_mean[w, b]), float(report.z_sq[w, b]))


def stability_doc(report) -> dict:
    body = report.to_dict()
    body.pop("pass", None)
    return _doc("stability", PASS if report.passed else FAIL, body)


def stability_rows(report, dt: float):
    n = report.gaps.shape[0]
    stride = max(1, (n - 1) // STABILITY_CSV_ROWS)
    idx = np.unique(np.concatenate([np.arange(0, n, stride), [report.gap_argmax, n - 1]]))
    for k in idx:
        yield int(k), float(k * dt), float(report.gaps[k]), float(report.bound[k]), float(report.slack[k])


def fractal_doc(est, cfg: RunConfig) -> dict:
    body = est.to_dict()
    body.update(expected_dimension=cfg.expected_dimension, tolerance=cfg.dimension_tolerance)
    ok = est.dimension is not None and abs(est.dimension - cfg.expected_dimension) <= cfg.dimension_tolerance
    return _doc("fractal", PASS if ok else FAIL, body)


# -- orchestration -------------------------------------------------------------------

def analyze(ens: Ensemble, cfg: RunConfig, out: FsPath) -> tuple[dict, list, dict]:
    """Run the configured analyses on ``ens``; write reports into ``out``.

    Returns (verdicts, written file names, per-phase seconds).
    """
    analyses = [a for a in cfg.analyses]
    field = cfg.field()
    timings = {}
    verdicts = {}
    files = []

    def emit_json(name, doc):
        io.write_json(out / f"{name}.json", doc)
        files.append(f"{name}.json")

    def emit_csv(name, header, rows):
        io.write_csv(out / name, header, rows)
        files.append(name)

    window = cfg.effective_window
    times = cfg.effective_times
    steps = rejected = None
    if "fractal" in analyses:
        steps, rejected = _fractal_steps(cfg, ens)
    k_low, k_high = cfg.band

    consumers = {}
    if "heisenberg" in analyses:
        consumers["heisenberg"] = HeisenbergScan(k_low, k_high)
    if "decompose" in analyses:
        consumers["decompose"] = DecompositionScan(cfg.n_xbins, cfg.min_count, window, method="moments")
    if "markov" in analyses:
        consumers["markov"] = MarkovScan(cfg.n_xbins, window, cfg.markov_min_group)
    results = {}
    if ens.stored is not None:
        # stored rows are read directly, which also works on a thinned file
        if "fractal" in analyses:
            results["fractal"] = increment_sums(ens, steps)
        if "equivalence" in analyses:
            results["equivalence"] = ens.at_indices(marginal_indices(ens.grid, times))
    else:
        if "fractal" in analyses:
            consumers["fractal"] = IncrementScan(steps)
        if "equivalence" in analyses:
            consumers["equivalence"] = RowScan(marginal_indices(ens.grid, times))

    if consumers:
        t0 = time.perf_counter()
        log.info("scanning %d paths x %d steps for %s", ens.n_paths, ens.grid.n_steps, ", ".join(consumers))
        got = scan(ens, *consumers.values())
        if len(consumers) == 1:
            got = [got]
        results.update(zip(consumers, got))
        timings["scan"] = time.perf_counter() - t0

    if "heisenberg" in results:
        r = results["heisenberg"]
        doc = heisenberg_doc(r)
        verdicts["heisenberg"] = doc["verdict"]
        emit_json("heisenberg", doc)
        emit_csv("heisenberg_histogram.csv", ["ratio_low", "ratio_high", "count"],
                 ((float(a), float(b), int(c)) for a, b, c in
                  zip(r.hist_edges[:-1], r.hist_edges[1:], r.hist_counts)))
    if "decompose" in results:
        est = results["decompose"]
        doc = decompose_doc(est, cfg, "moments")
        verdicts["decompose"] = doc["verdict"]
        emit_json("decompose", doc)
        emit_csv("decompose_cells.csv", ["t_start", "x_bin", "x_center", "count", "drift", "volatility",
                                         "eta_mean", "eta_sq_mean", "determined"], decompose_rows(est))
    if "markov" in results:
        r = results["markov"]
        doc = markov_doc(r)
        verdicts["markov"] = {"markov_consistent": PASS, "non_markov": FAIL}.get(r.verdict, UNDETERMINED)
        emit_json("markov", doc)
        emit_csv("markov_cells.csv", ["t_start", "x_bin", "z_mean", "z_second_moment"],
                 markov_rows(r, window, ens.grid.dt))
    if "fractal" in results:
        est = fit_dimension(steps, results["fractal"], ens.grid.dt, rejected)
        doc = fractal_doc(est, cfg)
        verdicts["fractal"] = doc["verdict"]
        emit_json("fractal", doc)
        emit_csv("fractal.csv", ["scale", "mean_increment", "count"],
                 zip(est.scales.tolist(), est.mean_increments.tolist(), est.counts.tolist()))

    if "equivalence" in analyses:
        t0 = time.perf_counter()
        walk_rows = results["equivalence"]
        ref_seed = cfg.effective_reference_seed
        reference = gaussian_reference(field, cfg.x0_spec, ens.grid, ens.n_paths, ref_seed, storage="lazy")
        ref_idx = marginal_indices(reference.grid, times)
        method = "transition" if cfg.reference_method == "auto" and field.affine is not None else "simulate"
        log.info("Gaussian reference (%s, seed %d)", method, ref_seed)
        if method == "transition":
            ref_rows = gaussian_reference_marginals(field, cfg.x0_spec, ens.grid, ens.n_paths, ref_seed, ref_idx)
        else:
            ref_rows = reference.at_indices(ref_idx)
        calibration = None
        if cfg.ks_threshold == "auto":
            cal = calibrate_ks_threshold(field, cfg.x0_spec, ens.grid.horizon, ens.n_paths, ens.n_paths,
                                         _spawn_seed(cfg.seed, 0xCA1), cfg.calibration_pairs,
                                         cfg.calibration_quantile)
            calibration = cal.to_dict()
            ks_threshold = cal.threshold
        else:
            ks_threshold = float(cfg.ks_threshold)
        rep = equivalence_report(ens, reference, times, ks_threshold, cfg.w1_threshold,
                                 walk_marginals=walk_rows, reference_marginals=ref_rows)
        body = rep.to_dict()
        body.pop("pass")
        body["calibration"] = calibration
        body["reference"] = {"seed": ref_seed, "noise": "gaussian", "n_paths": reference.n_paths,
                             "method": method}
        doc = _doc("equivalence", PASS if rep.passed else FAIL, body)
        verdicts["equivalence"] = doc["verdict"]
        emit_json("equivalence", doc)
        emit_csv("equivalence.csv", ["t", "ks", "w1", "verdict"],
                 ((r["t"], r["ks"], r["w1"], r["verdict"]) for r in rep.rows()))
        timings["equivalence"] = time.perf_counter() - t0

    if "stability" in analyses:
        t0 = time.perf_counter()
        lip = cfg.effective_lipschitz()
        x0 = float(cfg.x0_spec.sample(cfg.seed, [0])[0])
        other = field.shifted(cfg.delta_b, cfg.delta_sigma)
        rep = stability_check(field, other, x0, x0 + cfg.delta_x0, ens.grid, cfg.seed, lip)
        doc = stability_doc(rep)
        verdicts["stability"] = doc["verdict"]
        emit_json("stability", doc)
        emit_csv("stability.csv", ["step", "t", "gap", "gronwall_bound", "rounding_slack"],
                 stability_rows(rep, ens.grid.dt))
        timings["stability"] = time.perf_counter() - t0

    return verdicts, files, timings


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def summary_doc(cfg: RunConfig, ens: Ensemble, verdicts: dict, files: list, runtime: dict) -> dict:
    code = exit_code(verdicts)
    failed = sorted(k for k, v in verdicts.items() if v == FAIL)
    config = cfg.to_dict()
    # the output location is a property of the invocation, not of the results
    runtime = {**runtime, "out_dir": config.pop("out_dir")}
    return _doc("summary", FAIL if failed else PASS, {
        "config": config,
        "ensemble": ens.describe(),
        "verdicts": verdicts,
        "failed": failed,
        "exit_code": code,
        "files": sorted(files),
        "runtime": runtime,
    })


def run(cfg: RunConfig, ensemble: Ensemble | None = None) -> int:
    """Simulate (unless ``ensemble`` is given), analyse, and write every report."""
    started = _now()
    t0 = time.perf_counter()
    threads = configure_threads()
    out = FsPath(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    ens = ensemble if ensemble is not None else build_ensemble(cfg)
    if cfg.write_ensemble and ensemble is None:
        io.write_ensemble(ens, out / "ensemble.zwlk", cfg.ensemble_stride)
        files.append("ensemble.zwlk")
    verdicts, written, timings = analyze(ens, cfg, out)
    files += written
    timings["total"] = time.perf_counter() - t0
    runtime = {"started": started, "finished": _now(), "threads": threads,
               "seconds": {k: round(v, 3) for k, v in timings.items()}}
    doc = summary_doc(cfg, ens, verdicts, files, runtime)
    io.write_json(out / "summary.json", doc)
    return doc["exit_code"]


def noise_check(cfg: RunConfig) -> int:
    rep = noise_bias_report(NoiseStream(cfg.seed, 0), cfg.noise_draws)
    body = rep.to_dict()
    body.pop("passed", None)
    body["seed"] = cfg.seed
    doc = _doc("noise", PASS if rep.passed else FAIL, body)
    out = FsPath(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "noise.json", doc)
    return EXIT_OK if rep.passed else EXIT_FAIL


CONVERGENCE_STEPS = (10_000, 100_000, 1_000_000)


def _trend_metrics(out: FsPath) -> dict:
    import json

    def load(name):
        p = out / f"{name}.json"
        return json.loads(p.read_text()) if p.exists() else None

    m = {}
    h = load("heisenberg")
    if h:
        m["heisenberg_ratio_min"] = h["ratio_min"]
        m["heisenberg_ratio_max"] = h["ratio_max"]
    d = load("decompose")
    if d:
        m["volatility_min"] = d["cells"]["volatility_min"]
        m["volatility_max"] = d["cells"]["volatility_max"]
        m["drift_slope"] = d["drift_regression"]["slope"] if d["drift_regression"] else None
    k = load("markov")
    if k:
        m["markov_max_abs_z"] = k["max_abs_z"]
    e = load("equivalence")
    if e:
        m["ks_max"] = max(e["ks"])
        m["w1_max"] = max(e["w1"])
    s = load("stability")
    if s:
        m["stability_sup_gap"] = s["sup_gap"]
    f = load("fractal")
    if f:
        m["fractal_dimension"] = f["dimension"]
    return m


def convergence(cfg: RunConfig, steps=CONVERGENCE_STEPS) -> int:
    """Rerun the configured analyses at each n_steps and tabulate the key metrics."""
    started = _now()
    t0 = time.perf_counter()
    root = FsPath(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    runs, codes = [], []
    for n in steps:
        sub = root / f"n_steps_{n}"
        c = cfg.with_overrides(n_steps=int(n), out_dir=str(sub))
        code = run(c)
        codes.append(code)
        runs.append({"n_steps": int(n), "dt": c.grid.dt, "exit_code": code, "directory": sub.name,
                     "metrics": _trend_metrics(sub)})
    keys = sorted({k for r in runs for k in r["metrics"]})
    trends = {k: [r["metrics"].get(k) for r in runs] for k in keys}
    code = max(codes)
    doc = _doc("convergence", FAIL if code else PASS, {
        "n_steps": [int(n) for n in steps], "runs": runs, "trends": trends, "exit_code": code,
        "runtime": {"started": started, "finished": _now(), "seconds": round(time.perf_counter() - t0, 3)},
    })
    io.write_json(root / "convergence.json", doc)
    io.write_csv(root / "convergence.csv", ["n_steps", *keys],
                 ([r["n_steps"], *[r["metrics"].get(k) for k in keys]] for r in runs))
    return code
