"""Uniform time grid shared by the solvers.

Controls acting through drift terms live at half-steps t_{k+1/2} (midpoint
rule); boundary data and states live at the nodes t_k.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class TimeGrid:
    T: float
    nt: int

    def __post_init__(self):
        if self.nt < 2:
            raise ValueError("need at least 2 time steps")
        if self.T <= 0.0:
            raise ValueError("T must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.nt + 1)

    @cached_property
    def midpoints(self) -> np.ndarray:
        return (self.nodes[:-1] + self.nodes[1:]) / 2.0

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.nt * factor)


def timegrid_for(T: float, dt_target: float) -> TimeGrid:
    """Time grid whose dt divides T and does not exceed the target."""
    nt = max(2, int(np.ceil(T / dt_target - 1e-12)))
    return TimeGrid(T, nt)
