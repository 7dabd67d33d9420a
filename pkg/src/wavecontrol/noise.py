"""Reproducible Brownian increments and Monte Carlo ensemble statistics.

Increments come from counter-based Philox streams keyed by (seed, path index),
so paths can be generated in any order, in parallel, with bit-identical
results.  The filtration contract: a solver advancing step k may only read
increments 0..k-1; ``AdaptedIncrements`` enforces this in debug runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class AdaptednessViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class BrownianPath:
    seed: int
    path_index: int
    dt: float
    increments: np.ndarray  # shape (steps,), N(0, dt) iid

    @property
    def steps(self) -> int:
        return int(self.increments.shape[0])

    def terminal_value(self) -> float:
        return float(np.sum(self.increments))

    def values(self) -> np.ndarray:
        """W at the nodes t_k = k dt, starting from W(0) = 0."""
        w = np.empty(self.steps + 1)
        w[0] = 0.0
        np.cumsum(self.increments, out=w[1:])
        return w

    def coarsen(self, factor: int) -> "BrownianPath":
        """Aggregate consecutive increments; the same Brownian path on a
        coarser time grid (used by weak self-convergence checks)."""
        if self.steps % factor:
            raise ValueError("steps must be divisible by factor")
        inc = self.increments.reshape(-1, factor).sum(axis=1)
        return BrownianPath(self.seed, self.path_index, self.dt * factor, inc)

    def adapted(self) -> "AdaptedIncrements":
        return AdaptedIncrements(self.increments)


@dataclass
class AdaptedIncrements:
    """Cursor view over increments enforcing in-order consumption."""

    _increments: np.ndarray
    _cursor: int = 0

    def take(self, k: int) -> float:
        if k != self._cursor:
            raise AdaptednessViolation(
                f"increment {k} requested, cursor at {self._cursor}")
        self._cursor += 1
        return float(self._increments[k])


def sample_path(seed: int, dt: float, steps: int, path_index: int = 0) -> BrownianPath:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    gen = np.random.Generator(np.random.Philox(key=np.array(
        [seed & 0xFFFFFFFFFFFFFFFF, path_index & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)))
    inc = gen.standard_normal(steps) * np.sqrt(dt)
    return BrownianPath(seed, path_index, dt, inc)


@dataclass(frozen=True)
class Ensemble:
    base_seed: int
    n_paths: int

    def paths(self, dt: float, steps: int):
        for j in range(self.n_paths):
            yield sample_path(self.base_seed, dt, steps, path_index=j)

    def increments_matrix(self, dt: float, steps: int) -> np.ndarray:
        """All increments stacked, shape (n_paths, steps)."""
        return np.stack([p.increments for p in self.paths(dt, steps)])


@dataclass
class EnsembleStats:
    """Streaming (count, sum, sum of squares); merging is associative."""

    count: int = 0
    total: float = 0.0
    total_sq: float = 0.0

    def add(self, value: float) -> None:
        self.count += 1
        self.total += value
        self.total_sq += value * value

    def add_many(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        self.count += values.size
        self.total += float(values.sum())
        self.total_sq += float(np.sum(values * values))

    def merge(self, other: "EnsembleStats") -> "EnsembleStats":
        return EnsembleStats(self.count + other.count,
                             self.total + other.total,
                             self.total_sq + other.total_sq)

    @property
    def mean(self) -> float:
        if self.count == 0:
            raise ValueError("empty ensemble")
        return self.total / self.count

    @property
    def variance(self) -> float:
        if self.count < 2:
            raise ValueError("need at least two samples")
        m = self.mean
        return max(self.total_sq - self.count * m * m, 0.0) / (self.count - 1)

    @property
    def ci_halfwidth(self) -> float:
        return 1.96 * np.sqrt(self.variance / self.count)


def mc_mean(values: np.ndarray) -> dict[str, float]:
    """Sample mean with a 95% confidence half-width."""
    stats = EnsembleStats()
    stats.add_many(np.asarray(values, dtype=float))
    return {"mean": stats.mean, "ci": stats.ci_halfwidth, "n": stats.count}
