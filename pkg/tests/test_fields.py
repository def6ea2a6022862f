from __future__ import annotations

import math

import numpy as np
import pytest

import zitterwalk as zw
from zitterwalk.fields import compile_expression


def test_builtin_fields():
    f = zw.builtin_field("free", zw.PhysicalScale(hbar=2.0, mass=0.5))
    assert f.affine == (0.0, 0.0, 2.0)
    ou = zw.builtin_field("ou_nelson", omega=3.0)
    b, s = ou.evaluate(0.0, np.array([1.0, -2.0]))
    assert b.tolist() == [-3.0, 6.0]
    assert s.tolist() == [1.0, 1.0]


def test_builtin_field_errors():
    with pytest.raises(zw.ConfigurationError, match="omega"):
        zw.builtin_field("ou_nelson")
    with pytest.raises(zw.ConfigurationError):
        zw.builtin_field("ou_nelson", omega=-1.0)
    with pytest.raises(zw.ConfigurationError):
        zw.builtin_field("harmonic")
    with pytest.raises(zw.ConfigurationError):
        zw.PhysicalScale(hbar=0.0)
    with pytest.raises(zw.ConfigurationError):
        zw.PhysicalScale(mass=math.nan)


def test_shifted_adds_constants():
    f = zw.builtin_field("ou_nelson", omega=1.0).shifted(0.5, 0.25)
    b, s = f.evaluate(0.0, np.array([2.0]))
    assert b[0] == -1.5 and s[0] == 1.25
    g = zw.user_field(lambda t, x: np.sin(x), lambda t, x: 1.0 + 0 * x).shifted(1.0, 2.0)
    b, s = g.evaluate(0.0, np.array([0.0]))
    assert b[0] == 1.0 and s[0] == 3.0


def test_expression_fields():
    f = zw.expression_field("-x + sin(t)", "sqrt(1 + x**2)")
    b, s = f.evaluate(0.5, np.array([0.0, 2.0]))
    assert np.allclose(b, [math.sin(0.5), -2 + math.sin(0.5)])
    assert np.allclose(s, [1.0, math.sqrt(5.0)])
    const = zw.expression_field("2", "3")
    b, s = const.evaluate(0.0, np.zeros(3))
    assert b.tolist() == [2.0] * 3 and s.tolist() == [3.0] * 3


@pytest.mark.parametrize("expr", ["__import__('os')", "x.real", "open('f')", "y + 1", "x +", "[x]"])
def test_expression_rejects_unsafe_or_invalid(expr):
    with pytest.raises(zw.ConfigurationError):
        compile_expression(expr)


def test_history_field_receives_previous_increment():
    seen = []

    def drift(t, x, prev):
        seen.append(np.array(prev))
        return 0.0 * x

    f = zw.history_field(drift, lambda t, x, prev: 1.0 + 0 * x)
    p = zw.simulate_path(f, 0.0, zw.make_grid(5), zw.NoiseStream(1))
    assert seen[0].tolist() == [0.0]
    assert np.allclose([s[0] for s in seen[1:]], np.diff(p.values)[:-1])
