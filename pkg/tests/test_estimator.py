from __future__ import annotations

import math

import numpy as np
import pytest

import zitterwalk as zw
from zitterwalk.estimator import (CellScan, DecompositionScan, HeisenbergScan, MarkovScan,
                                  ratio_ulp_error, scan)


def numpy_decomposition(values, dt, nbins):
    """Per-step binned drift/volatility/residual moments, straight from the definitions."""
    T = values.shape[0] - 1
    out = {k: np.full((T, nbins), np.nan) for k in ("drift", "vol", "eta_mean", "eta_sq", "center")}
    count = np.zeros((T, nbins), dtype=np.int64)
    for k in range(T):
        x, dx = values[k], values[k + 1] - values[k]
        lo, hi = x.min(), x.max()
        scale = nbins / (hi - lo) if hi > lo else 0.0
        bins = np.clip(((x - lo) * scale).astype(np.int64), 0, nbins - 1)
        for b in range(nbins):
            d = dx[bins == b]
            count[k, b] = d.size
            if d.size == 0:
                continue
            drift = d.mean() / dt
            r = d - drift * dt
            s = math.sqrt(np.mean(r * r) / dt)
            eta = r / (s * math.sqrt(dt)) if s > 0 else np.full(d.size, np.nan)
            out["drift"][k, b] = drift
            out["vol"][k, b] = s
            out["eta_mean"][k, b] = eta.mean()
            out["eta_sq"][k, b] = np.mean(eta * eta)
            out["center"][k, b] = lo + (b + 0.5) * (hi - lo) / nbins
    return count, out


def test_heisenberg_free_walk_is_exact(warm):
    grid = zw.make_grid(100_000)
    path = zw.simulate_path(zw.builtin_field("free"), 0.0, grid, zw.NoiseStream(77))
    rep = zw.heisenberg_check(path, 0.5, 2.0)
    assert rep.passed and rep.violations == 0 and rep.n_ratios == 100_000
    assert ratio_ulp_error(path, 0.0, 1.0) <= 8
    assert np.all(np.abs(rep.ratios - 1.0) <= 1e-9)


def test_heisenberg_dyadic_grid_has_no_rounding():
    grid = zw.make_grid(2**20)
    path = zw.simulate_path(zw.builtin_field("free"), 0.0, grid, zw.NoiseStream(5))
    rep = zw.heisenberg_check(path, 0.5, 2.0)
    assert rep.ratio_min == 1.0 and rep.ratio_max == 1.0


def test_heisenberg_histogram_matches_numpy():
    f = zw.builtin_field("ou_nelson", omega=50.0)
    grid = zw.make_grid(2000, 1.0)
    ens = zw.simulate_ensemble(f, {"kind": "normal", "mean": 0.0, "std": 3.0}, grid, 64, seed=4)
    rep = zw.heisenberg_ensemble(ens, 0.9, 1.1)
    r = (np.diff(ens.values, axis=0) ** 2 / grid.dt).ravel()
    counts, _ = np.histogram(r, bins=rep.hist_edges)
    # np.histogram closes the last bin on the right; the kernel sends r == last edge above range
    counts[-1] -= np.count_nonzero(r == rep.hist_edges[-1])
    assert np.array_equal(rep.hist_counts, counts)
    assert rep.below == np.count_nonzero(r < rep.hist_edges[0])
    assert rep.above == np.count_nonzero(r >= rep.hist_edges[-1])
    assert rep.violations == np.count_nonzero((r < 0.9) | (r > 1.1))
    assert rep.ratio_min == r.min() and rep.ratio_max == r.max()


def test_heisenberg_reports_violation_locations():
    grid = zw.make_grid(1000)
    ens = zw.simulate_ensemble(zw.builtin_field("free"), 0.0, grid, 3, seed=1)
    rep = zw.heisenberg_ensemble(ens, 2.0, 3.0)
    assert not rep.passed
    assert rep.violations == 3000
    assert len(rep.violation_locations) == 100
    assert rep.violation_locations[0] == {"step": 0, "path_id": 0}
    with pytest.raises(zw.ConfigurationError):
        zw.heisenberg_ensemble(ens, 3.0, 2.0)
    thin = zw.simulate_ensemble(zw.builtin_field("free"), 0.0, grid, 3, seed=1, storage="thinned", stride=10)
    with pytest.raises(zw.ResolutionError):
        zw.heisenberg_ensemble(thin, 0.5, 2.0)


@pytest.mark.parametrize("method", ["two_pass", "moments"])
def test_decomposition_matches_definitions(method):
    f = zw.builtin_field("ou_nelson", omega=1.5)
    grid = zw.make_grid(40, 1.0)
    ens = zw.simulate_ensemble(f, {"kind": "normal", "mean": 0.0, "std": 1.0}, grid, 3000, seed=12)
    est = zw.estimate_decomposition(ens, n_xbins=6, min_count=30, method=method)
    count, ref = numpy_decomposition(ens.values, grid.dt, 6)
    assert np.array_equal(est.count, count)
    det = count >= 30
    assert np.array_equal(est.determined, det)
    for key, attr in (("drift", "drift"), ("vol", "volatility"), ("eta_mean", "eta_mean"),
                      ("eta_sq", "eta_sq_mean"), ("center", "center")):
        got = getattr(est, attr)[det]
        want = ref[key][det]
        assert np.allclose(got, want, rtol=1e-9, atol=1e-9), key
    assert np.all(np.isnan(est.drift[~det]))


def test_two_routes_agree_with_pooled_windows():
    f = zw.builtin_field("ou_nelson", omega=1.0)
    grid = zw.make_grid(1000, 2.0)
    ens = zw.simulate_ensemble(f, {"kind": "normal", "mean": 0.0, "std": 0.7}, grid, 2000, seed=3)
    a = zw.estimate_decomposition(ens, n_xbins=8, min_count=100, window=50, method="two_pass")
    b = zw.estimate_decomposition(ens, n_xbins=8, min_count=100, window=50, method="moments")
    assert np.array_equal(a.count, b.count)
    det = a.determined
    assert np.allclose(a.drift[det], b.drift[det], rtol=1e-10, atol=1e-10)
    assert np.allclose(a.volatility[det], b.volatility[det], rtol=1e-12)
    assert np.allclose(a.eta_sq_mean[det], b.eta_sq_mean[det], rtol=1e-9)


def test_constant_coefficients_are_recovered():
    grid = zw.make_grid(200, 1.0)
    ens = zw.simulate_ensemble(zw.constant_field(0.7, 1.3), 0.0, grid, 50_000, seed=8)
    est = zw.estimate_decomposition(ens, n_xbins=4, min_count=1000)
    det = est.determined
    n = est.count[det]
    # drift standard error is sigma / sqrt(n dt)
    assert np.all(np.abs(est.drift[det] - 0.7) <= 6 * 1.3 / np.sqrt(n * grid.dt))
    # a +-1 increment has dx - b dt = +-sigma sqrt(dt) exactly, so s tracks sigma closely
    assert np.all(np.abs(est.volatility[det] - 1.3) <= 6 * 1.3 / np.sqrt(n))
    rm = zw.residual_moments(est)
    assert rm.passed


def test_residuals_are_two_valued():
    grid = zw.make_grid(50, 1.0)
    ens = zw.simulate_ensemble(zw.builtin_field("free"), 0.0, grid, 5000, seed=2)
    est = zw.estimate_decomposition(ens, n_xbins=1, min_count=100)
    eta = zw.residuals(ens, est)
    assert eta.shape == (50, 5000)
    for k in range(50):
        vals = np.unique(np.round(eta[k], 12))
        assert vals.size == 2
        assert vals[0] * vals[1] == pytest.approx(-1.0, abs=1e-9)


def test_drift_regression_on_linear_field():
    f = zw.builtin_field("ou_nelson", omega=2.0)
    grid = zw.make_grid(500, 1.0)
    ens = zw.simulate_ensemble(f, {"kind": "normal", "mean": 0.0, "std": 0.5}, grid, 20_000, seed=1)
    reg = zw.regress_drift(zw.estimate_decomposition(ens, n_xbins=16, min_count=1000, window=10))
    assert abs(reg.slope + 2.0) < 0.15
    assert reg.n_cells > 100


def test_degenerate_cells_and_insufficient_data():
    grid = zw.make_grid(10)
    ens = zw.simulate_ensemble(zw.builtin_field("free"), 0.0, grid, 20, seed=1)
    est = zw.estimate_decomposition(ens, n_xbins=4, min_count=1000)
    assert not est.determined.any()
    with pytest.raises(zw.InsufficientDataError):
        zw.residual_moments(est)
    with pytest.raises(zw.InsufficientDataError):
        zw.regress_drift(est)
    # an ensemble whose paths never move has zero volatility in every cell
    flat = zw.Ensemble.from_values(np.zeros((11, 200)), grid)
    est = zw.estimate_decomposition(flat, n_xbins=2, min_count=50)
    assert est.degenerate[est.determined].all()
    assert not zw.residual_moments(est).passed
    with pytest.raises(zw.ConfigurationError):
        zw.estimate_decomposition(ens, min_count=5)


def _sign_feedback_field(strength=0.5):
    # volatility grows after an up-step and shrinks after a down-step
    return zw.history_field(lambda t, x, h: 0.0 * x,
                            lambda t, x, h: 1.0 + strength * np.sign(h))


def test_markov_diagnostic_separates_markov_and_history_fields():
    grid = zw.make_grid(200, 1.0)
    ou = zw.simulate_ensemble(zw.builtin_field("ou_nelson", omega=1.0), 0.0, grid, 10_000, seed=5)
    rep = zw.markov_diagnostic(ou, n_xbins=8, window=10)
    assert rep.verdict == "markov_consistent"
    assert rep.max_abs_z <= rep.z_threshold and rep.z_threshold >= 4
    hist = zw.simulate_ensemble(_sign_feedback_field(), 0.0, grid, 10_000, seed=5)
    rep = zw.markov_diagnostic(hist, n_xbins=8, window=10)
    assert rep.verdict == "non_markov"
    assert rep.worst["statistic"] == "second_moment"


def test_markov_undetermined_with_few_paths():
    grid = zw.make_grid(100)
    ens = zw.simulate_ensemble(zw.builtin_field("free"), 0.0, grid, 500, seed=1)
    assert zw.markov_diagnostic(ens).verdict == "undetermined"


def test_fused_scan_equals_separate_scans():
    f = zw.builtin_field("ou_nelson", omega=1.0)
    grid = zw.make_grid(3000, 1.0)
    ens = zw.simulate_ensemble(f, 0.5, grid, 10_000, seed=31, storage="lazy")
    h, d, m = scan(ens, HeisenbergScan(0.1, 10.0), DecompositionScan(8, 1000, 30, "moments"),
                   MarkovScan(8, 30))
    h2 = zw.heisenberg_ensemble(ens, 0.1, 10.0)
    d2 = zw.estimate_decomposition(ens, n_xbins=8, min_count=1000, window=30, method="moments")
    m2 = zw.markov_diagnostic(ens, n_xbins=8, window=30)
    assert h.to_dict() == h2.to_dict()
    assert np.array_equal(d.drift, d2.drift, equal_nan=True)
    assert m.to_dict() == m2.to_dict()


def test_cell_moments_are_chunking_invariant():
    f = zw.builtin_field("ou_nelson", omega=1.0)
    grid = zw.make_grid(600, 1.0)
    ens = zw.simulate_ensemble(f, 0.0, grid, 500, seed=2, storage="dense")
    results = []
    for steps in (600, 60, 7):
        c = CellScan(4, 3)
        c.begin(ens)
        for k0, block in ens.iter_chunks(steps - steps % 3 or 3):
            c.update(k0, block)
        results.append(c.finish())
    for r in results[1:]:
        assert np.array_equal(r.count, results[0].count)
        assert np.allclose(r.sum1, results[0].sum1, rtol=0, atol=1e-15)
        assert np.allclose(r.sum2, results[0].sum2, rtol=1e-15)
