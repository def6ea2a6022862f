from __future__ import annotations

import numpy as np
import pytest

import zitterwalk as zw


@pytest.fixture(scope="session")
def warm():
    """Compile every kernel once so timed tests measure steady-state speed."""
    g = zw.make_grid(64, 1.0)
    f = zw.builtin_field("ou_nelson", omega=1.0)
    ens = zw.simulate_ensemble(f, 0.0, g, 8, seed=0, storage="lazy")
    zw.heisenberg_ensemble(ens, 0.1, 10.0)
    zw.estimate_decomposition(ens, n_xbins=2, min_count=30)
    zw.estimate_decomposition(ens, n_xbins=2, min_count=30, method="moments")
    zw.markov_diagnostic(ens, n_xbins=2)
    ref = zw.gaussian_reference(f, 0.0, g, 8, seed=1)
    zw.equivalence_report(ens, ref, [0.5], 0.5)
    free = zw.builtin_field("free")
    zw.stability_check(free, free.shifted(1e-6, 1e-6), 0.0, 0.0, g, 0, 0.0)
    zw.heisenberg_check(zw.simulate_path(free, 0.0, g, zw.NoiseStream(0)), 0.1, 10.0)
    zw.noise_bias_report(zw.NoiseStream(0), 1000)
    zw.simulate_ensemble(free, 0.0, zw.make_grid(256), 2, seed=0, storage="dense")
    return True


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[number] = f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {detail}"
        print(ACCEPTANCE_LINES[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
