"""Lower-order coefficient fields a1..a5 and the size functional r2.

Coefficients are deterministic functions of (t, x): scalars, expression
strings over t, x (and y in 2D), or python callables.  a4 must vanish on the
boundary (it multiplies the H^{-1} control g and its product with the adjoint
state must lie in H_0^1); this is validated at construction.

r2 = sum_{k=1..3} |a_k|_inf^2 + |a5|_inf^2 + |a4|_{W^{1,inf}}^2 evaluated by
grid sup, with |a4|_{W^{1,inf}} = max(sup |a4|, sup_j sup |d_j a4|) and the
gradient taken by centered/one-sided differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import Grid
from .timegrid import TimeGrid

_ALLOWED = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp,
    "log": np.log, "sqrt": np.sqrt, "abs": np.abs, "tanh": np.tanh,
    "where": np.where, "minimum": np.minimum, "maximum": np.maximum,
    "pi": np.pi, "e": np.e,
}


class ExpressionError(ValueError):
    pass


def compile_expression(expr: str, ndim: int) -> Callable:
    """Vectorized f(t, X) from an expression in t, x (and y when 2D)."""
    names = {"t", "x"} | ({"y"} if ndim == 2 else set())
    try:
        code = compile(expr, "<coefficient>", "eval")
    except SyntaxError as exc:
        raise ExpressionError(f"bad expression {expr!r}: {exc}") from exc
    unknown = set(code.co_names) - names - set(_ALLOWED)
    if unknown:
        raise ExpressionError(f"unknown names in {expr!r}: {sorted(unknown)}")

    def fn(t, X):
        local = {"t": t, "x": X[0]}
        if ndim == 2:
            local["y"] = X[1]
        out = eval(code, {"__builtins__": {}}, {**_ALLOWED, **local})
        return np.broadcast_to(np.asarray(out, dtype=float), np.shape(X[0])).copy()

    return fn


def as_coefficient(spec, ndim: int) -> Callable:
    if callable(spec):
        return spec
    if isinstance(spec, str):
        return compile_expression(spec, ndim)
    value = float(spec)

    def const(t, X, _v=value):
        return np.full(np.shape(X[0]), _v)

    return const


class UnsupportedModeError(RuntimeError):
    """Raised when a solver is asked for the random-coefficient regime."""


@dataclass
class CoefficientSet:
    """a1, a2, a3, a5 bounded fields; a4 vanishing on the boundary."""

    grid: Grid
    a1: Callable = field(default=None)
    a2: Callable = field(default=None)
    a3: Callable = field(default=None)
    a4: Callable = field(default=None)
    a5: Callable = field(default=None)
    random: bool = False  # random (omega-dependent) coefficients: unsupported

    @classmethod
    def build(cls, grid: Grid, a1=0.0, a2=0.0, a3=0.0, a4=0.0, a5=0.0,
              random: bool = False) -> "CoefficientSet":
        n = grid.ndim
        cs = cls(grid=grid,
                 a1=as_coefficient(a1, n), a2=as_coefficient(a2, n),
                 a3=as_coefficient(a3, n), a4=as_coefficient(a4, n),
                 a5=as_coefficient(a5, n), random=random)
        cs._validate_a4()
        return cs

    @classmethod
    def zero(cls, grid: Grid) -> "CoefficientSet":
        return cls.build(grid)

    def _validate_a4(self, sample_times=(0.0, 0.37, 1.0)) -> None:
        mask = self.grid.boundary_mask()
        for t in sample_times:
            vals = self.a4(t, self.grid.meshes)
            worst = float(np.max(np.abs(vals[mask]))) if np.any(mask) else 0.0
            if worst > 1e-12 * max(1.0, float(np.max(np.abs(vals)))):
                raise ValueError(
                    f"a4 must vanish on the boundary (got {worst:g} at t={t})")

    def eval(self, name: str, t: float) -> np.ndarray:
        return getattr(self, name)(t, self.grid.meshes)

    def is_zero(self, name: str, times) -> bool:
        return all(not np.any(self.eval(name, float(t))) for t in times)

    def sup_norms(self, tgrid: TimeGrid) -> dict[str, float]:
        sups = {k: 0.0 for k in ("a1", "a2", "a3", "a4", "a5", "grad_a4")}
        for t in tgrid.nodes:
            for k in ("a1", "a2", "a3", "a4", "a5"):
                sups[k] = max(sups[k], float(np.max(np.abs(self.eval(k, float(t))))))
            g = np.gradient(self.eval("a4", float(t)), *self.grid.h,
                            edge_order=2)
            if self.grid.ndim == 1:
                g = [g]
            sups["grad_a4"] = max(sups["grad_a4"],
                                  max(float(np.max(np.abs(gi))) for gi in g))
        return sups

    def r2(self, tgrid: TimeGrid) -> float:
        s = self.sup_norms(tgrid)
        a4_w1inf = max(s["a4"], s["grad_a4"])
        return (s["a1"] ** 2 + s["a2"] ** 2 + s["a3"] ** 2
                + s["a5"] ** 2 + a4_w1inf ** 2)

    def r1(self, tgrid: TimeGrid) -> float:
        s = self.sup_norms(tgrid)
        return s["a1"] ** 2 + s["a2"] ** 2 + s["a3"] ** 2
