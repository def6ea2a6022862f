from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import zitterwalk as zw


def python_walk(b0, b1, s0, x0, grid, eps):
    """Left-endpoint recursion on Python floats."""
    xs = [x0]
    dt, sq = grid.dt, math.sqrt(grid.dt)
    for e in eps:
        x = xs[-1]
        xs.append((x + (b0 + b1 * x) * dt) + (s0 * e) * sq)
    return np.array(xs)


def test_single_step_formula():
    f = zw.constant_field(0.5, 2.0)
    x = zw.step(1.0, 0.0, f, -1, 0.25)
    assert x == 1.0 + 0.5 * 0.25 - 2.0 * 0.5
    with pytest.raises(zw.ConfigurationError):
        zw.step(1.0, 0.0, f, 0, 0.25)
    with pytest.raises(zw.DegenerateVolatilityError):
        zw.step(1.0, 0.0, zw.constant_field(0.0, 0.0), 1, 0.25)


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(-3, 0), st.floats(0.1, 3), st.floats(-1, 1),
       st.integers(0, 2**32), st.integers(1, 700))
def test_compiled_kernel_matches_python_recursion(b0, b1, s0, x0, seed, n):
    grid = zw.make_grid(n, 1.5)
    field = zw.fields._affine(b0, b1, s0, "constant", {})
    ens = zw.simulate_ensemble(field, x0, grid, 3, seed, storage="dense")
    for i in range(3):
        eps = zw.NoiseStream(seed, i).take(n)
        assert np.array_equal(ens.values[:, i], python_walk(b0, b1, s0, x0, grid, eps))


def test_user_field_path_matches_python_recursion():
    f = zw.expression_field("-x**3 + cos(t)", "1 + 0.5*sin(x)")
    grid = zw.make_grid(300, 1.0)
    ens = zw.simulate_ensemble(f, 0.3, grid, 4, seed=8, storage="dense")
    for i in range(4):
        eps = zw.NoiseStream(8, i).take(300)
        x = [0.3]
        for k, e in enumerate(eps):
            t = k * grid.dt
            b = -x[-1] ** 3 + math.cos(t)
            s = 1 + 0.5 * math.sin(x[-1])
            x.append((x[-1] + b * grid.dt) + (s * e) * grid.sqrt_dt)
        assert np.allclose(ens.values[:, i], x, rtol=0, atol=1e-13)


def test_simulate_path_uses_stream():
    grid = zw.make_grid(1000)
    p = zw.simulate_path(zw.builtin_field("free"), 0.0, grid, zw.NoiseStream(4, 2))
    assert np.array_equal(np.sign(np.diff(p.values)), zw.NoiseStream(4, 2).take(1000))
    assert p.times()[-1] == 1.0


def _binomial_abs_mean(n):
    return n * math.comb(n, n // 2) / 2**n


def test_free_walk_endpoint_is_scaled_binomial():
    n = 64
    grid = zw.make_grid(n, 1.0)
    ens = zw.simulate_ensemble(zw.builtin_field("free"), 0.0, grid, 200_000, seed=3)
    s = ens.final_values() * 8.0
    assert np.array_equal(s, np.round(s))
    assert np.all(s % 2 == 0)
    expected = _binomial_abs_mean(n)
    sd = math.sqrt(n - expected**2)
    assert abs(np.abs(s).mean() - expected) < 5 * sd / math.sqrt(s.size)
    k, counts = np.unique((s + n) // 2, return_counts=True)
    pmf = stats.binom.pmf(k, n, 0.5)
    keep = pmf * s.size > 20
    obs = counts[keep]
    exp = pmf[keep] / pmf[keep].sum() * obs.sum()
    assert stats.chisquare(obs, exp).pvalue > 1e-4


def test_storage_modes_agree():
    f = zw.builtin_field("ou_nelson", omega=2.0)
    grid = zw.make_grid(10_000, 2.0)
    dense = zw.simulate_ensemble(f, 1.0, grid, 5, seed=21, storage="dense")
    lazy = zw.simulate_ensemble(f, 1.0, grid, 5, seed=21, storage="lazy")
    thin = zw.simulate_ensemble(f, 1.0, grid, 5, seed=21, storage="thinned", stride=100)
    assert lazy.lazy and thin.stride == 100 and dense.dense
    assert np.array_equal(dense.values, lazy.values)
    assert np.array_equal(thin.values, dense.values[::100])
    idx = [0, 1, 4096, 4097, 9999, 10_000]
    assert np.array_equal(zw.simulate_ensemble(f, 1.0, grid, 5, seed=21, storage="lazy").at_indices(idx),
                          dense.values[idx])


def test_paths_do_not_depend_on_ensemble_size():
    f = zw.builtin_field("free")
    grid = zw.make_grid(500)
    small = zw.simulate_ensemble(f, 0.0, grid, 3, seed=5)
    big = zw.simulate_ensemble(f, 0.0, grid, 50, seed=5)
    assert np.array_equal(small.values, big.values[:, :3])


def test_chunks_share_boundary_rows():
    ens = zw.simulate_ensemble(zw.builtin_field("free"), 0.0, zw.make_grid(1000), 4, seed=1, storage="lazy")
    blocks = list(ens.iter_chunks(300))
    assert [k0 for k0, _ in blocks] == [0, 300, 600, 900]
    for (_, a), (_, b) in zip(blocks, blocks[1:]):
        assert np.array_equal(a[-1], b[0])
    assert blocks[-1][1].shape[0] == 101


def test_initial_condition_samplers():
    grid = zw.make_grid(4)
    f = zw.builtin_field("free")
    e = zw.simulate_ensemble(f, {"kind": "normal", "mean": 1.0, "std": 2.0}, grid, 100_000, seed=2)
    x0 = e.values[0]
    assert abs(x0.mean() - 1.0) < 5 * 2.0 / math.sqrt(x0.size)
    assert abs(x0.std() - 2.0) < 0.03
    u = zw.simulate_ensemble(f, {"kind": "uniform", "low": -1.0, "high": 3.0}, grid, 10_000, seed=2)
    assert u.values[0].min() >= -1.0 and u.values[0].max() <= 3.0
    with pytest.raises(zw.ConfigurationError):
        zw.X0Spec.parse({"kind": "normal", "sd": 1.0})


def test_gaussian_noise_ensemble():
    grid = zw.make_grid(16, 1.0)
    ref = zw.gaussian_reference(zw.builtin_field("free"), 0.0, grid, 50_000, seed=6)
    assert ref.noise == "gaussian"
    x = ref.final_values()
    assert stats.kstest(x, "norm").pvalue > 1e-4


@pytest.mark.filterwarnings("ignore:overflow")
def test_degenerate_and_nonfinite_coefficients():
    grid = zw.make_grid(100)
    with pytest.raises(zw.DegenerateVolatilityError):
        zw.simulate_ensemble(zw.constant_field(0.0, 0.0), 0.0, grid, 10, seed=1)
    with pytest.raises(zw.DegenerateVolatilityError) as info:
        zw.simulate_ensemble(zw.expression_field("0", "0.5 - t"), 0.0, zw.make_grid(10), 2, seed=1)
    assert info.value.step == 5 and info.value.t == 0.5
    with pytest.raises(zw.NumericDomainError):
        zw.simulate_ensemble(zw.expression_field("1e300 * exp(x*x)", "1"), 3.0, grid, 2, seed=1)
    with pytest.raises(zw.NumericDomainError):
        zw.simulate_ensemble(zw.constant_field(0.0, 1.0).shifted(1e308, 0), 1e308, grid, 2, seed=1,
                             storage="dense")


def test_invalid_requests():
    f = zw.builtin_field("free")
    grid = zw.make_grid(100)
    for n in (0, -1, 2.5):
        with pytest.raises(zw.ConfigurationError):
            zw.simulate_ensemble(f, 0.0, grid, n, seed=1)
    with pytest.raises(zw.ConfigurationError):
        zw.simulate_ensemble(f, 0.0, grid, 2, seed=1, storage="thinned", stride=7)
    with pytest.raises(zw.ConfigurationError):
        zw.simulate_ensemble(f, 0.0, grid, 2, seed=1, storage="tape")


def test_thread_count_does_not_change_values():
    f = zw.builtin_field("ou_nelson", omega=1.0)
    grid = zw.make_grid(2000)
    zw.configure_threads(1)
    a = zw.simulate_ensemble(f, 0.0, grid, 300, seed=9, storage="dense").values
    zw.configure_threads(None)
    b = zw.simulate_ensemble(f, 0.0, grid, 300, seed=9, storage="dense").values
    assert np.array_equal(a, b)
