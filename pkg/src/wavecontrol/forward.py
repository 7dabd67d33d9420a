"""Path-wise solver for the controlled stochastic wave system

    dy    = (yhat + a5 f) dt + (a3 y + f) dW,
    dyhat = (lap y + a1 y + a4 g) dt + (a2 y + g) dW,
    y|boundary = h on Gamma_0 (zero elsewhere),  y(0), yhat(0) given.

Time stepping is the trapezoid (implicit midpoint) rule in all dt terms and
left-endpoint Euler-Maruyama in the dW terms.  The trapezoid map is a Cayley
transform of the discrete wave generator, so the free deterministic energy
|y|_{L^2}^2 + |yhat|_{H^{-1}}^2 is conserved to solver precision, and the
scheme is unconditionally stable.  The explicit 'leapfrog' variant (symplectic
Euler pair, CFL-limited) is kept for cross-checks.

Drift controls f, g live at half-steps (midpoint rule); the boundary control h
lives at the nodes and enters through the Laplacian stencil of the averaged
state, which is what makes the discrete duality with the backward solver exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficients import CoefficientSet
from .grid import Face, Grid, l2_norm, hm1_norm, laplacian_apply, laplacian_matrix
from .noise import BrownianPath, EnsembleStats
from .timegrid import TimeGrid


class BlowupError(RuntimeError):
    pass


@dataclass
class ControlTriple:
    """f, g on half-steps (nt, *shape); h node-indexed per observed face."""

    f: np.ndarray
    g: np.ndarray
    h: dict[Face, np.ndarray]

    @classmethod
    def zero(cls, grid: Grid, tgrid: TimeGrid,
             faces: tuple[Face, ...] = ()) -> "ControlTriple":
        shape = (tgrid.nt,) + grid.shape
        h = {face: np.zeros((tgrid.nt + 1,) + grid.face_shape(face))
             for face in faces}
        return cls(np.zeros(shape), np.zeros(shape), h)

    @classmethod
    def from_callables(cls, grid: Grid, tgrid: TimeGrid, f=None, g=None,
                       h: dict[Face, object] | None = None) -> "ControlTriple":
        shape = (tgrid.nt,) + grid.shape
        fa = np.zeros(shape)
        ga = np.zeros(shape)
        for k, tm in enumerate(tgrid.midpoints):
            if f is not None:
                fa[k] = f(tm, grid.meshes)
            if g is not None:
                ga[k] = g(tm, grid.meshes)
        hd: dict[Face, np.ndarray] = {}
        for face, fn in (h or {}).items():
            vals = np.zeros((tgrid.nt + 1,) + grid.face_shape(face))
            face_coords = tuple(m[grid.face_slice(face)] for m in grid.meshes)
            for k, t in enumerate(tgrid.nodes):
                vals[k] = fn(t, face_coords)
            hd[face] = vals
        return cls(fa, ga, hd)

    def scaled(self, c: float) -> "ControlTriple":
        return ControlTriple(c * self.f, c * self.g,
                             {fc: c * v for fc, v in self.h.items()})


def boundary_extension(grid: Grid, h: dict[Face, np.ndarray], k: int) -> np.ndarray:
    """Full-shape array carrying the node-k boundary data, zero inside."""
    out = grid.zero_field()
    for face, vals in h.items():
        out[grid.face_slice(face)] = vals[k]
    return out


@dataclass
class ForwardTrajectory:
    grid: Grid
    tgrid: TimeGrid
    y: np.ndarray      # (nt+1, *shape), boundary rows carry h
    yhat: np.ndarray   # (nt+1, *shape), interior field

    def terminal(self) -> tuple[np.ndarray, np.ndarray]:
        return self.y[-1], self.yhat[-1]


def _step_operator(grid: Grid, dt: float, a1_mid: np.ndarray):
    """Factorized interior operator I - (dt^2/4)(lap + a1)."""
    A = sp.identity(grid.n_interior, format="csc") - (dt ** 2 / 4.0) * (
        laplacian_matrix(grid)
        + sp.diags(a1_mid[grid.interior].ravel(), format="csc"))
    return spla.factorized(A.tocsc())


def _coeff_samples(coeffs: CoefficientSet, tgrid: TimeGrid, name: str,
                   at: str) -> list[np.ndarray]:
    times = tgrid.midpoints if at == "mid" else tgrid.nodes[:-1]
    return [coeffs.eval(name, float(t)) for t in times]


def _is_static(samples: list[np.ndarray]) -> bool:
    first = samples[0]
    return all(np.array_equal(first, s) for s in samples[1:])


def solve_forward(grid: Grid, tgrid: TimeGrid, y0: np.ndarray, yhat0: np.ndarray,
                  controls: ControlTriple | None = None,
                  coeffs: CoefficientSet | None = None,
                  path: BrownianPath | None = None,
                  scheme: str = "midpoint", cfl: float = 0.9,
                  blowup_cap: float = 1e12,
                  adapted_debug: bool = False) -> ForwardTrajectory:
    """Integrate the system over [0, T] for one (possibly deterministic) path."""
    if coeffs is None:
        coeffs = CoefficientSet.zero(grid)
    if coeffs.random:
        raise NotImplementedError("random coefficient fields are unsupported")
    if controls is None:
        controls = ControlTriple.zero(grid, tgrid)
    if path is not None and path.steps != tgrid.nt:
        raise ValueError("Brownian path length must match the time grid")
    if scheme not in ("midpoint", "leapfrog"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if scheme == "leapfrog":
        limit = cfl * min(grid.h) / np.sqrt(grid.ndim)
        if tgrid.dt > limit:
            raise ValueError(
                f"leapfrog CFL violated: dt={tgrid.dt:g} > {limit:g}")

    dt = tgrid.dt
    nt = tgrid.nt
    interior = grid.interior
    increments = path.adapted() if (path is not None and adapted_debug) else None

    a1_mid = _coeff_samples(coeffs, tgrid, "a1", "mid")
    a4_mid = _coeff_samples(coeffs, tgrid, "a4", "mid")
    a5_mid = _coeff_samples(coeffs, tgrid, "a5", "mid")
    stochastic = path is not None
    if stochastic:
        a2_left = _coeff_samples(coeffs, tgrid, "a2", "left")
        a3_left = _coeff_samples(coeffs, tgrid, "a3", "left")

    static_a1 = _is_static(a1_mid)
    solver = _step_operator(grid, dt, a1_mid[0]) if (static_a1 and scheme == "midpoint") else None

    y = np.empty((nt + 1,) + grid.shape)
    yhat = np.zeros((nt + 1,) + grid.shape)
    y[0] = y0
    y[0][grid.boundary_mask()] = 0.0
    bext0 = boundary_extension(grid, controls.h, 0)
    y[0] += bext0
    yhat[0][interior] = yhat0[interior]

    int_shape = tuple(m - 1 for m in grid.nx)

    for k in range(nt):
        yk, yhk = y[k], yhat[k]
        if not np.isfinite(yk).all() or np.max(np.abs(yk)) > blowup_cap:
            raise BlowupError(f"state norm exceeded cap at step {k}")

        if stochastic:
            dW = increments.take(k) if increments is not None else float(path.increments[k])
            noise_y = (a3_left[k] * yk + controls.f[k]) * dW
            noise_yh = (a2_left[k] * yk + controls.g[k]) * dW
        else:
            noise_y = 0.0
            noise_yh = 0.0

        Ry = yk + (dt / 2.0) * yhk + dt * a5_mid[k] * controls.f[k] + noise_y
        lap_yk = laplacian_apply(grid, yk)
        Lyk = lap_yk + a1_mid[k] * yk
        Ryh = yhk + (dt / 2.0) * Lyk + dt * a4_mid[k] * controls.g[k] + noise_yh

        bext = boundary_extension(grid, controls.h, k + 1)

        if scheme == "midpoint":
            rhs_field = Ry + (dt / 2.0) * Ryh
            rhs = rhs_field[interior] + (dt ** 2 / 4.0) * laplacian_apply(grid, bext)[interior]
            if solver is None:
                step_solver = _step_operator(grid, dt, a1_mid[k])
            else:
                step_solver = solver
            ynext_int = step_solver(rhs.ravel()).reshape(int_shape)
            ynext = bext.copy()
            ynext[interior] = ynext_int
            yhat[k + 1][interior] = (2.0 / dt) * (ynext - Ry)[interior]
        else:  # leapfrog: explicit position update, new-state force
            ynext = bext.copy()
            ynext[interior] = (yk + dt * yhk + dt * a5_mid[k] * controls.f[k]
                               + noise_y)[interior]
            Lyn = laplacian_apply(grid, ynext) + a1_mid[k] * ynext
            yhat[k + 1][interior] = (yhk + dt * (Lyn + a4_mid[k] * controls.g[k])
                                     + noise_yh)[interior]
        y[k + 1] = ynext

    return ForwardTrajectory(grid=grid, tgrid=tgrid, y=y, yhat=yhat)


def pair_energy(grid: Grid, y: np.ndarray, yhat: np.ndarray) -> float:
    """State-space energy |y|_{L^2}^2 + |yhat|_{H^{-1}}^2."""
    return l2_norm(grid, y) ** 2 + hm1_norm(grid, yhat) ** 2


def controls_norm(grid: Grid, tgrid: TimeGrid, controls: ControlTriple) -> dict[str, float]:
    """L^2-in-time norms of (f, g, h): f in L^2(Q), g in L^2(0,T;H^-1),
    h in L^2 of the observed boundary."""
    dt = tgrid.dt
    f_sq = dt * sum(l2_norm(grid, controls.f[k]) ** 2 for k in range(tgrid.nt))
    g_sq = 0.0
    if np.any(controls.g):
        g_sq = dt * sum(hm1_norm(grid, controls.g[k]) ** 2 for k in range(tgrid.nt))
    h_sq = 0.0
    for face, vals in controls.h.items():
        w = grid.face_measure(face)
        per_node = np.array([float(np.sum(w * v * v)) for v in vals])
        h_sq += float(np.trapezoid(per_node, dx=dt))
    return {"f": np.sqrt(f_sq), "g": np.sqrt(g_sq), "h": np.sqrt(h_sq)}


@dataclass
class WellposednessReport:
    ratio: float
    sup_state: float
    data_size: float
    degenerate: bool


def wellposedness_probe(grid: Grid, tgrid: TimeGrid, y0, yhat0,
                        controls: ControlTriple, coeffs: CoefficientSet,
                        seeds: range | None = None, base_seed: int = 0,
                        n_paths: int = 0, stride: int = 10,
                        scheme: str = "midpoint") -> WellposednessReport:
    """sup_t sqrt(E[|y|^2 + |yhat|^2_{H^{-1}}]) over the data+controls size.

    n_paths = 0 runs the single deterministic trajectory.
    """
    from .noise import sample_path

    cn = controls_norm(grid, tgrid, controls)
    data = (l2_norm(grid, y0) + hm1_norm(grid, yhat0)
            + cn["f"] + cn["g"] + cn["h"])
    if data < 1e-14:
        return WellposednessReport(ratio=np.nan, sup_state=0.0, data_size=0.0,
                                   degenerate=True)

    sample_ks = list(range(0, tgrid.nt + 1, max(1, stride))) + [tgrid.nt]
    sample_ks = sorted(set(sample_ks))
    acc = {k: EnsembleStats() for k in sample_ks}
    runs = max(1, n_paths)
    for j in range(runs):
        path = sample_path(base_seed, tgrid.dt, tgrid.nt, path_index=j) if n_paths else None
        traj = solve_forward(grid, tgrid, y0, yhat0, controls, coeffs,
                             path=path, scheme=scheme)
        for k in sample_ks:
            acc[k].add(pair_energy(grid, traj.y[k], traj.yhat[k]))
    sup_state = np.sqrt(max(st.mean for st in acc.values()))
    return WellposednessReport(ratio=float(sup_state / data),
                               sup_state=float(sup_state),
                               data_size=float(data), degenerate=False)
