"""Drift and volatility fields b(t, x), sigma(t, x).

Builtin fields are affine in ``x`` (``b = b0 + b1 * x``, ``sigma = s0``) and
run on the compiled kernels.  Anything else is a ``user`` field: a pair of
numpy-vectorised callables evaluated once per step over all paths.
"""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class PhysicalScale:
    hbar: float = 1.0
    mass: float = 1.0

    def __post_init__(self):
        for name in ("hbar", "mass"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigurationError(f"{name} must be finite and positive, got {v!r}")
        if not (math.isfinite(self.diffusion) and self.diffusion > 0):
            raise ConfigurationError("hbar/mass must be finite and positive")

    @property
    def diffusion(self) -> float:
        """hbar / m, the squared volatility of the free walk."""
        return self.hbar / self.mass


@dataclass(frozen=True)
class CoefficientField:
    drift: Callable
    volatility: Callable
    kind: str = "user"
    params: dict = field(default_factory=dict)
    uses_history: bool = False

    @property
    def affine(self) -> tuple[float, float, float] | None:
        """(b0, b1, s0) for fields the compiled kernels handle, else None."""
        if self.kind in ("constant", "ou_nelson"):
            p = self.params
            return float(p["b0"]), float(p["b1"]), float(p["sigma"])
        return None

    def evaluate(self, t, x, prev=None):
        """Return (b, sigma) broadcast to the shape of ``x``."""
        if self.uses_history:
            if prev is None:
                prev = np.zeros_like(np.asarray(x, dtype=np.float64))
            b = self.drift(t, x, prev)
            s = self.volatility(t, x, prev)
        else:
            b = self.drift(t, x)
            s = self.volatility(t, x)
        shape = np.shape(x)
        return np.broadcast_to(np.asarray(b, dtype=np.float64), shape), \
            np.broadcast_to(np.asarray(s, dtype=np.float64), shape)

    def shifted(self, delta_b: float = 0.0, delta_sigma: float = 0.0) -> "CoefficientField":
        """The field (b + delta_b, sigma + delta_sigma)."""
        if self.affine is not None:
            p = dict(self.params)
            p["b0"] = p["b0"] + delta_b
            p["sigma"] = p["sigma"] + delta_sigma
            return _affine(p["b0"], p["b1"], p["sigma"], self.kind, p)
        drift, vol = self.drift, self.volatility
        if self.uses_history:
            return replace(self, drift=lambda t, x, h: drift(t, x, h) + delta_b,
                           volatility=lambda t, x, h: vol(t, x, h) + delta_sigma,
                           params={**self.params, "shifted": [delta_b, delta_sigma]})
        return replace(self, drift=lambda t, x: drift(t, x) + delta_b,
                       volatility=lambda t, x: vol(t, x) + delta_sigma,
                       params={**self.params, "shifted": [delta_b, delta_sigma]})

    def describe(self) -> dict:
        out = {"kind": self.kind}
        out.update({k: v for k, v in self.params.items() if isinstance(v, (int, float, str, list))})
        return out


def _affine(b0: float, b1: float, sigma: float, kind: str, params: dict) -> CoefficientField:
    b0, b1, sigma = float(b0), float(b1), float(sigma)

    def drift(t, x):
        return b0 + b1 * np.asarray(x, dtype=np.float64)

    def volatility(t, x):
        return np.full(np.shape(x), sigma) if np.ndim(x) else sigma

    return CoefficientField(drift, volatility, kind=kind,
                            params={**params, "b0": b0, "b1": b1, "sigma": sigma})


def constant_field(drift: float, volatility: float) -> CoefficientField:
    if not (math.isfinite(drift) and math.isfinite(volatility)):
        raise ConfigurationError("constant coefficients must be finite")
    return _affine(drift, 0.0, volatility, "constant", {})


def builtin_field(name: str, scale: PhysicalScale | None = None,
                  omega: float | None = None) -> CoefficientField:
    """``free``: b = 0; ``ou_nelson``: b = -omega * x.  Both use sigma = sqrt(hbar/m)."""
    scale = scale or PhysicalScale()
    sigma = math.sqrt(scale.diffusion)
    if name == "free":
        return _affine(0.0, 0.0, sigma, "constant", {"name": "free"})
    if name == "ou_nelson":
        if omega is None:
            raise ConfigurationError("ou_nelson requires omega")
        if not (math.isfinite(omega) and omega > 0):
            raise ConfigurationError(f"omega must be finite and positive, got {omega!r}")
        return _affine(0.0, -float(omega), sigma, "ou_nelson", {"name": "ou_nelson", "omega": float(omega)})
    raise ConfigurationError(f"unknown builtin field {name!r} (expected 'free' or 'ou_nelson')")


def user_field(drift: Callable, volatility: Callable, **params) -> CoefficientField:
    """Wrap vectorised callables ``f(t, x) -> array``."""
    return CoefficientField(drift, volatility, kind="user", params=params)


def history_field(drift: Callable, volatility: Callable, **params) -> CoefficientField:
    """Field whose callables also receive the previous increment: ``f(t, x, prev_dx)``.

    ``prev_dx`` is zero at the first step.  This is how path history is
    injected for non-Markov counterexamples.
    """
    return CoefficientField(drift, volatility, kind="user", params=params, uses_history=True)


_FUNCS = {name: getattr(np, name) for name in (
    "sin", "cos", "tan", "exp", "log", "sqrt", "abs", "tanh", "sinh", "cosh",
    "arctan", "sign", "minimum", "maximum", "where", "clip")}
_CONSTS = {"pi": math.pi, "e": math.e}
_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load,
          ast.Constant, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub,
          ast.UAdd, ast.Compare, ast.Gt, ast.Lt, ast.GtE, ast.LtE)


def compile_expression(expr, variables=("t", "x")) -> Callable:
    """Compile an arithmetic expression in ``t`` and ``x`` to a vectorised callable.

    Numbers are accepted as constants.  Only arithmetic, comparisons and a
    fixed set of numpy functions are allowed.
    """
    if isinstance(expr, (int, float)) and not isinstance(expr, bool):
        value = float(expr)
        return lambda *args: value
    if not isinstance(expr, str):
        raise ConfigurationError(f"coefficient must be a number or expression string, got {expr!r}")
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ConfigurationError(f"cannot parse expression {expr!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if not isinstance(node, _NODES):
            raise ConfigurationError(f"disallowed syntax {type(node).__name__} in {expr!r}")
        if isinstance(node, ast.Name) and node.id not in (*variables, *_FUNCS, *_CONSTS):
            raise ConfigurationError(f"unknown name {node.id!r} in {expr!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS):
            raise ConfigurationError(f"disallowed call in {expr!r}")
    code = compile(tree, "<expression>", "eval")
    env = {"__builtins__": {}, **_FUNCS, **_CONSTS}

    def fn(*args):
        return eval(code, env, dict(zip(variables, args)))

    fn.expression = expr
    return fn


def expression_field(drift, volatility) -> CoefficientField:
    f = user_field(compile_expression(drift), compile_expression(volatility))
    return replace(f, params={"drift": str(drift), "volatility": str(volatility)})
