"""Box grids, the discrete Dirichlet Laplacian, traces and discrete norms.

Fields are plain numpy arrays over the full node set (boundary included),
shape ``grid.shape``.  Dirichlet fields carry zeros on the boundary unless
they represent boundary data.  The H^{-1} norm is realized through the
inverse discrete Dirichlet Laplacian (discrete Riesz map), which keeps the
control Gramian exactly symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

# face = (axis, side), side 0 -> low end, 1 -> high end
Face = tuple[int, int]

POISSON_TOL = 1e-10
POISSON_MAXITER = 20_000


class PoissonConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on a box, nx[i] cells (nx[i]+1 nodes) per axis."""

    bounds: tuple[tuple[float, float], ...]
    nx: tuple[int, ...]

    def __post_init__(self):
        if len(self.bounds) != len(self.nx):
            raise ValueError("bounds and nx must have the same length")
        if len(self.bounds) not in (1, 2):
            raise ValueError("only 1D and 2D grids are supported")
        for (lo, hi), m in zip(self.bounds, self.nx):
            if not hi > lo:
                raise ValueError(f"degenerate axis [{lo}, {hi}]")
            if m < 3:
                raise ValueError("need at least 3 cells per axis")

    @property
    def ndim(self) -> int:
        return len(self.nx)

    @cached_property
    def h(self) -> tuple[float, ...]:
        return tuple((hi - lo) / m for (lo, hi), m in zip(self.bounds, self.nx))

    @cached_property
    def shape(self) -> tuple[int, ...]:
        return tuple(m + 1 for m in self.nx)

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(np.linspace(lo, hi, m + 1)
                     for (lo, hi), m in zip(self.bounds, self.nx))

    @cached_property
    def meshes(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*self.axes, indexing="ij"))

    @cached_property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def interior(self) -> tuple[slice, ...]:
        return (slice(1, -1),) * self.ndim

    @cached_property
    def n_interior(self) -> int:
        return int(np.prod([m - 1 for m in self.nx]))

    def faces(self) -> list[Face]:
        return [(ax, side) for ax in range(self.ndim) for side in (0, 1)]

    def face_slice(self, face: Face) -> tuple:
        """Index tuple selecting the face's nodes in a full-shape array."""
        ax, side = face
        idx: list = [slice(None)] * self.ndim
        idx[ax] = 0 if side == 0 else -1
        return tuple(idx)

    def face_shape(self, face: Face) -> tuple[int, ...]:
        ax, _ = face
        return tuple(s for i, s in enumerate(self.shape) if i != ax)

    def face_measure(self, face: Face) -> np.ndarray:
        """Trapezoid quadrature weights over the face nodes (1D face: scalar 1)."""
        ax, _ = face
        if self.ndim == 1:
            return np.array(1.0)
        other = 1 - ax
        w = np.full(self.shape[other], self.h[other])
        w[0] *= 0.5
        w[-1] *= 0.5
        return w

    def zero_field(self) -> np.ndarray:
        return np.zeros(self.shape)

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for face in self.faces():
            mask[self.face_slice(face)] = True
        return mask


# -- interior index bookkeeping ------------------------------------------------

def _interior_matrix(grid: Grid) -> sp.csc_matrix:
    """Sparse negative-definite Dirichlet Laplacian on interior nodes."""
    blocks = []
    for ax in range(grid.ndim):
        m = grid.nx[ax] - 1
        main = np.full(m, -2.0)
        off = np.ones(m - 1)
        lap1d = sp.diags([off, main, off], [-1, 0, 1]) / grid.h[ax] ** 2
        blocks.append(lap1d)
    if grid.ndim == 1:
        A = blocks[0]
    else:
        m0, m1 = grid.nx[0] - 1, grid.nx[1] - 1
        A = sp.kron(blocks[0], sp.identity(m1)) + sp.kron(sp.identity(m0), blocks[1])
    return A.tocsc()


_MATRIX_CACHE: dict[tuple, sp.csc_matrix] = {}


def laplacian_matrix(grid: Grid) -> sp.csc_matrix:
    key = (grid.bounds, grid.nx)
    if key not in _MATRIX_CACHE:
        _MATRIX_CACHE[key] = _interior_matrix(grid)
    return _MATRIX_CACHE[key]


def laplacian_apply(grid: Grid, u: np.ndarray) -> np.ndarray:
    """Second-order 2n+1 point stencil; boundary values of u participate,
    output vanishes on the boundary rows."""
    out = np.zeros_like(u)
    core = [slice(1, -1)] * grid.ndim
    acc = np.zeros_like(u[tuple(core)])
    for ax in range(grid.ndim):
        lo = [slice(1, -1)] * grid.ndim
        hi = [slice(1, -1)] * grid.ndim
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        acc += (u[tuple(hi)] - 2.0 * u[tuple(core)] + u[tuple(lo)]) / grid.h[ax] ** 2
    out[tuple(core)] = acc
    return out


def poisson_solve(grid: Grid, f: np.ndarray, tol: float = POISSON_TOL) -> np.ndarray:
    """Solve -lap(u) = f with u = 0 on the boundary, conjugate gradient."""
    A = -laplacian_matrix(grid)
    rhs = f[grid.interior].ravel()
    if not np.any(rhs):
        return np.zeros_like(f)
    x, info = spla.cg(A, rhs, rtol=tol, atol=0.0, maxiter=POISSON_MAXITER)
    if info != 0:
        raise PoissonConvergenceError(f"CG did not converge (info={info})")
    u = np.zeros_like(f)
    u[grid.interior] = x.reshape([m - 1 for m in grid.nx])
    return u


def inner(grid: Grid, u: np.ndarray, v: np.ndarray) -> float:
    """Discrete L^2 inner product over interior nodes."""
    return float(grid.cell_volume * np.sum(u[grid.interior] * v[grid.interior]))


def l2_norm(grid: Grid, u: np.ndarray) -> float:
    return float(np.sqrt(max(inner(grid, u, u), 0.0)))


def h01_seminorm_sq(grid: Grid, u: np.ndarray) -> float:
    """Squared H_0^1 seminorm via one-sided edge gradients (summation-by-parts
    compatible with the stencil: <-lap u, v> = sum of edge products exactly)."""
    total = 0.0
    for ax in range(grid.ndim):
        lo = [slice(None)] * grid.ndim
        hi = [slice(None)] * grid.ndim
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        diff = (u[tuple(hi)] - u[tuple(lo)]) / grid.h[ax]
        total += grid.cell_volume * float(np.sum(diff * diff))
    return total


def h01_norm(grid: Grid, u: np.ndarray) -> float:
    return float(np.sqrt(h01_seminorm_sq(grid, u)))


def hm1_norm(grid: Grid, u: np.ndarray) -> float:
    """H^{-1} norm: sqrt(<u, (-lap)^{-1} u>)."""
    w = poisson_solve(grid, u)
    return float(np.sqrt(max(inner(grid, u, w), 0.0)))


def norms(grid: Grid, u: np.ndarray) -> dict[str, float]:
    return {"l2": l2_norm(grid, u), "h01": h01_norm(grid, u), "hm1": hm1_norm(grid, u)}


def normal_trace(grid: Grid, u: np.ndarray, face: Face, order: int = 2) -> np.ndarray:
    """Outward normal derivative on a face by one-sided differences.

    order=2 is the analysis-facing trace; order=1 ((u_b - u_nb)/h) is the
    realization under which the discrete Green identity is exact, used by the
    duality Gramian.
    """
    ax, side = face
    h = grid.h[ax]

    def shifted(k: int) -> np.ndarray:
        idx: list = [slice(None)] * grid.ndim
        idx[ax] = (-1 - k) if side == 1 else k
        return u[tuple(idx)]

    ub, u1, u2 = shifted(0), shifted(1), shifted(2)
    if order == 1:
        return (ub - u1) / h
    if order == 2:
        return (3.0 * ub - 4.0 * u1 + u2) / (2.0 * h)
    raise ValueError("order must be 1 or 2")


def face_integral(grid: Grid, face: Face, values: np.ndarray) -> float:
    """Integral of face-node values against the trapezoid face measure."""
    return float(np.sum(grid.face_measure(face) * values))


def smallest_dirichlet_eigenvalue(grid: Grid) -> float:
    """Smallest eigenvalue of -lap_h on the grid (exact discrete formula)."""
    lam = 0.0
    for ax in range(grid.ndim):
        lo, hi = grid.bounds[ax]
        lam += (4.0 / grid.h[ax] ** 2) * np.sin(np.pi * grid.h[ax] / (2.0 * (hi - lo))) ** 2
    return float(lam)
