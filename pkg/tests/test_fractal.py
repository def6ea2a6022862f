from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import zitterwalk as zw
from zitterwalk.fractal import IncrementScan, fit_dimension


def _free(n_steps, n_paths, seed=1, storage="auto"):
    return zw.simulate_ensemble(zw.builtin_field("free"), 0.0, zw.make_grid(n_steps), n_paths, seed,
                                storage=storage)


def test_smooth_line_has_dimension_one():
    grid = zw.make_grid(2**16)
    line = zw.Ensemble.from_values(grid.times(), grid)
    est = zw.estimate_dimension(line)
    assert est.reliable
    assert abs(est.dimension - 1.0) < 1e-9
    assert np.allclose(est.mean_increments, est.scales, rtol=1e-9)


def test_free_walk_has_dimension_two():
    est = zw.estimate_dimension(_free(2**17, 16))
    assert est.reliable and est.r_squared >= 0.99
    assert abs(est.dimension - 2.0) < 0.05


def test_mean_increment_matches_binomial_oracle():
    ens = _free(4096, 2000, seed=3)
    for m in (16, 64, 256):
        exact = math.sqrt(ens.grid.dt) * m * math.comb(m, m // 2) / 2**m
        sd = math.sqrt(ens.grid.dt * m - exact**2)
        n = 2000 * (4096 // m)
        got = zw.mean_increment(ens, m * ens.grid.dt)
        # aligned increments are independent within and across paths
        assert abs(got - exact) < 5 * sd / math.sqrt(n)


def test_lazy_and_stored_agree():
    stored = _free(20_000, 6, seed=2, storage="dense")
    lazy = _free(20_000, 6, seed=2, storage="lazy")
    a, b = zw.estimate_dimension(stored), zw.estimate_dimension(lazy)
    assert np.allclose(a.mean_increments, b.mean_increments, rtol=1e-14)
    assert a.counts.tolist() == b.counts.tolist()


def test_thinned_storage_supports_multiples_of_stride():
    dense = _free(2**14, 4, seed=5, storage="dense")
    thin = zw.simulate_ensemble(zw.builtin_field("free"), 0.0, zw.make_grid(2**14), 4, 5,
                                storage="thinned", stride=16)
    assert zw.mean_increment(thin, 64 * thin.grid.dt) == zw.mean_increment(dense, 64 * dense.grid.dt)
    with pytest.raises(zw.ResolutionError):
        zw.mean_increment(thin, 24 * thin.grid.dt)


def test_scale_validation():
    ens = _free(10_000, 2)
    dt = ens.grid.dt
    est = zw.estimate_dimension(ens, [16 * dt, 20.5 * dt, 8 * dt, 64 * dt, 256 * dt, 1024 * dt,
                                      4096 * dt, 64 * dt])
    assert est.scales.tolist() == [16 * dt, 64 * dt, 256 * dt, 1024 * dt]
    reasons = sorted(r["reason"] for r in est.rejected_scales)
    assert len(reasons) == 3
    assert any("horizon / 4" in r for r in reasons) and any("16 dt" in r for r in reasons)
    with pytest.raises(zw.InsufficientDataError):
        zw.estimate_dimension(ens, [16 * dt, 32 * dt, 64 * dt])
    with pytest.raises(zw.InsufficientDataError):
        zw.estimate_dimension(ens, [16 * dt, 20 * dt, 24 * dt, 28 * dt, 32 * dt])
    with pytest.raises(zw.ConfigurationError):
        zw.mean_increment(ens, 4000 * dt)


@settings(max_examples=10, deadline=None)
@given(st.permutations([16, 64, 256, 1024, 2048]), st.integers(0, 4))
def test_scale_order_and_repeats_do_not_matter(order, dup):
    ens = _free(2**13, 3, seed=7)
    dt = ens.grid.dt
    base = zw.estimate_dimension(ens, [m * dt for m in (16, 64, 256, 1024, 2048)])
    scales = [m * dt for m in order] + [order[dup] * dt]
    est = zw.estimate_dimension(ens, scales)
    assert est.hurst == base.hurst and est.scales.tolist() == base.scales.tolist()


def test_amplitude_rescaling_leaves_dimension_unchanged():
    ens = _free(2**14, 4, seed=9, storage="dense")
    base = zw.estimate_dimension(ens)
    for c in (2.0, 0.125, 3.0, 1e-3):
        scaled = zw.Ensemble.from_values(ens.values * c, ens.grid)
        est = zw.estimate_dimension(scaled)
        assert est.hurst == pytest.approx(base.hurst, abs=1e-12)
    doubled = zw.estimate_dimension(zw.Ensemble.from_values(ens.values * 2.0, ens.grid))
    assert np.array_equal(doubled.mean_increments, 2.0 * base.mean_increments)


def test_unreliable_fit_reports_no_dimension():
    est = fit_dimension([16, 64, 256, 1024], [(1.0, 1), (3.0, 1), (1.5, 1), (2.0, 1)], 1e-4)
    assert est.r_squared < 0.99
    assert est.dimension is None and not est.reliable
    assert est.to_dict()["dimension"] is None
    with pytest.raises(zw.InsufficientDataError):
        fit_dimension([16, 64, 256, 1024], [(0.0, 5)] * 4, 1e-4)


def test_increment_scan_streams_aligned_sums():
    ens = _free(1000, 3, seed=4, storage="dense")
    scanner = IncrementScan([16, 250])
    scanner.begin(ens)
    for k0, block in ens.iter_chunks(77):
        scanner.update(k0, block)
    (s16, n16), (s250, n250) = scanner.finish()
    v = ens.values
    assert n16 == 3 * 62 and n250 == 3 * 4
    assert s16 == pytest.approx(np.abs(np.diff(v[0:993:16], axis=0)).sum(), rel=1e-14)
    assert s250 == pytest.approx(np.abs(np.diff(v[::250], axis=0)).sum(), rel=1e-14)
