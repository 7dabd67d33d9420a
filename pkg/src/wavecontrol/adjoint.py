"""Backward wave system in the deterministic-data regime and its diagnostics.

With deterministic coefficients and terminal data the martingale parts of the
backward system vanish identically, so the quadruple (z, Z, zhat, Zhat)
reduces to (z, 0, zhat, 0) solving

    dz = zhat dt,   dzhat - lap z dt = a1 z dt,   z|boundary = 0,
    z(tau), zhat(tau) given,

integrated backward with the same trapezoid rule as the forward solver (the
backward sweep is the exact inverse Cayley map, so backward-then-forward
reproduces terminal data to solver precision).

Diagnostics: the hidden-regularity boundary trace, the transposition duality
residual against a forward trajectory, and two-sided Gronwall energy bounds
with the smallest working constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coefficients import CoefficientSet, UnsupportedModeError
from .forward import ControlTriple, ForwardTrajectory, _coeff_samples, _is_static, _step_operator, boundary_extension
from .grid import Face, Grid, face_integral, h01_seminorm_sq, inner, l2_norm, laplacian_apply, normal_trace
from .noise import EnsembleStats
from .timegrid import TimeGrid

RESIDUAL_FLOOR = 1e-14


@dataclass
class TerminalData:
    """(z(tau), zhat(tau)) in H_0^1 x L^2; z(tau) must vanish on the boundary."""

    zT: np.ndarray
    zhatT: np.ndarray

    def validated(self, grid: Grid) -> "TerminalData":
        mask = grid.boundary_mask()
        worst = float(np.max(np.abs(self.zT[mask])))
        if worst > 1e-12 * max(1.0, float(np.max(np.abs(self.zT)))):
            raise ValueError("terminal z must vanish on the boundary")
        z = self.zT.copy()
        z[mask] = 0.0
        zh = self.zhatT.copy()
        zh[mask] = 0.0
        return TerminalData(z, zh)


def sine_mode(grid: Grid, modes: tuple[int, ...] | int) -> np.ndarray:
    """Product of Dirichlet sine modes, e.g. sin(k pi (x-lo)/(hi-lo))."""
    if isinstance(modes, int):
        modes = (modes,) * grid.ndim
    out = np.ones(grid.shape)
    for ax, k in enumerate(modes):
        lo, hi = grid.bounds[ax]
        out = out * np.sin(k * np.pi * (grid.meshes[ax] - lo) / (hi - lo))
    return out


def bump(grid: Grid, center, radius: float) -> np.ndarray:
    """Compactly supported C^2 polynomial bump (1 - r^2)^4 on r < 1."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    r2 = sum(((grid.meshes[i] - center[i]) / radius) ** 2
             for i in range(grid.ndim))
    out = np.where(r2 < 1.0, (1.0 - np.minimum(r2, 1.0)) ** 4, 0.0)
    mask = grid.boundary_mask()
    out[mask] = 0.0
    return out


def moving_bump(grid: Grid, center: float, radius: float) -> TerminalData:
    """1D packet leaving the observed face: terminal pair (F, -F') of the
    left-moving profile z(t,x) = F(x + (T-t)); backward in time the packet
    travels away from the high face."""
    if grid.ndim != 1:
        raise ValueError("moving_bump is a 1D preset")
    x = grid.meshes[0]
    s = (x - center) / radius
    inside = np.abs(s) < 1.0
    F = np.where(inside, (1.0 - np.minimum(s * s, 1.0)) ** 4, 0.0)
    Fp = np.where(inside, -8.0 * s / radius * (1.0 - np.minimum(s * s, 1.0)) ** 3, 0.0)
    mask = grid.boundary_mask()
    F[mask] = 0.0
    Fp[mask] = 0.0
    return TerminalData(zT=F, zhatT=-Fp)


@dataclass
class AdjointTrajectory:
    grid: Grid
    tgrid: TimeGrid
    z: np.ndarray          # (nt+1, *shape)
    zhat: np.ndarray
    combo_f: np.ndarray    # a5 zhat + Zhat (deterministic mode: a5 zhat)
    combo_g: np.ndarray    # a4 z + Z (deterministic mode: a4 z)
    trace: dict[Face, np.ndarray]   # second-order d z/d nu per face, (nt+1, ...)

    @property
    def Z(self) -> np.ndarray:
        return np.zeros_like(self.z)

    @property
    def Zhat(self) -> np.ndarray:
        return np.zeros_like(self.zhat)

    def trace_first_order(self, face: Face) -> np.ndarray:
        return np.stack([normal_trace(self.grid, zk, face, order=1)
                         for zk in self.z])


def solve_adjoint(grid: Grid, tgrid: TimeGrid, terminal: TerminalData,
                  coeffs: CoefficientSet | None = None) -> AdjointTrajectory:
    """Backward trapezoid sweep from t = tau (= tgrid.T) to t = 0."""
    if coeffs is None:
        coeffs = CoefficientSet.zero(grid)
    if coeffs.random:
        raise UnsupportedModeError(
            "the adjoint solver supports deterministic coefficients only "
            "(random coefficients force nonzero martingale parts)")
    terminal = terminal.validated(grid)

    dt = tgrid.dt
    nt = tgrid.nt
    interior = grid.interior
    int_shape = tuple(m - 1 for m in grid.nx)

    a1_mid = _coeff_samples(coeffs, tgrid, "a1", "mid")
    static_a1 = _is_static(a1_mid)
    solver = _step_operator(grid, dt, a1_mid[0]) if static_a1 else None

    z = np.zeros((nt + 1,) + grid.shape)
    zhat = np.zeros((nt + 1,) + grid.shape)
    z[nt] = terminal.zT
    zhat[nt][interior] = terminal.zhatT[interior]

    for k in range(nt - 1, -1, -1):
        znext, zhnext = z[k + 1], zhat[k + 1]
        Lzn = laplacian_apply(grid, znext) + a1_mid[k] * znext
        Rz = znext - (dt / 2.0) * zhnext
        Rzh = zhnext - (dt / 2.0) * Lzn
        rhs = (Rz - (dt / 2.0) * Rzh)[interior]
        step_solver = solver if solver is not None else _step_operator(grid, dt, a1_mid[k])
        zk_int = step_solver(rhs.ravel()).reshape(int_shape)
        z[k][interior] = zk_int
        zhat[k][interior] = (2.0 / dt) * (Rz - z[k])[interior]

    combo_f = np.zeros_like(zhat)
    combo_g = np.zeros_like(z)
    for k, t in enumerate(tgrid.nodes):
        combo_f[k] = coeffs.eval("a5", float(t)) * zhat[k]
        combo_g[k] = coeffs.eval("a4", float(t)) * z[k]

    trace = {face: np.stack([normal_trace(grid, zk, face, order=2) for zk in z])
             for face in grid.faces()}
    return AdjointTrajectory(grid=grid, tgrid=tgrid, z=z, zhat=zhat,
                             combo_f=combo_f, combo_g=combo_g, trace=trace)


def hidden_regularity_norm(traj: AdjointTrajectory,
                           faces: tuple[Face, ...] | None = None) -> float:
    """L^2 norm of the normal-derivative trace over (0, tau) x (faces)."""
    grid, tgrid = traj.grid, traj.tgrid
    if faces is None:
        faces = tuple(grid.faces())
    total = 0.0
    for face in faces:
        per_node = np.array([face_integral(grid, face, tk * tk)
                             for tk in traj.trace[face]])
        total += float(np.trapezoid(per_node, dx=tgrid.dt))
    return float(np.sqrt(total))


@dataclass
class TranspositionReport:
    residual: float
    lhs: float
    rhs: float
    degenerate: bool
    lhs_ci: float = 0.0


def _duality_rhs(grid: Grid, tgrid: TimeGrid, adj: AdjointTrajectory,
                 controls: ControlTriple, gamma0: tuple[Face, ...]) -> float:
    """- int <f, a5 zhat> + int <g, a4 z> - int_{Sigma_0} (dz/dnu) h, midpoint
    quadrature with node-averaged adjoint fields."""
    dt = tgrid.dt
    cf_bar = 0.5 * (adj.combo_f[:-1] + adj.combo_f[1:])
    cg_bar = 0.5 * (adj.combo_g[:-1] + adj.combo_g[1:])
    term_f = -dt * sum(inner(grid, controls.f[k], cf_bar[k])
                       for k in range(tgrid.nt))
    term_g = dt * sum(inner(grid, controls.g[k], cg_bar[k])
                      for k in range(tgrid.nt))
    term_h = 0.0
    for face in gamma0:
        if face not in controls.h:
            continue
        tr_bar = 0.5 * (adj.trace[face][:-1] + adj.trace[face][1:])
        h_bar = 0.5 * (controls.h[face][:-1] + controls.h[face][1:])
        term_h -= dt * sum(face_integral(grid, face, tr_bar[k] * h_bar[k])
                           for k in range(tgrid.nt))
    return term_f + term_g + term_h


def _duality_lhs(grid: Grid, fwd: ForwardTrajectory, adj: AdjointTrajectory,
                 y0: np.ndarray, yhat0: np.ndarray) -> float:
    return (inner(grid, fwd.yhat[-1], adj.z[-1])
            - inner(grid, yhat0, adj.z[0])
            - inner(grid, fwd.y[-1], adj.zhat[-1])
            + inner(grid, y0, adj.zhat[0]))


def transposition_residual(fwd: ForwardTrajectory | list[ForwardTrajectory],
                           adj: AdjointTrajectory, controls: ControlTriple,
                           y0: np.ndarray, yhat0: np.ndarray,
                           gamma0: tuple[Face, ...]) -> TranspositionReport:
    """Both sides of the duality identity; the forward side may be a Monte
    Carlo batch of trajectories (expectation with a confidence half-width)."""
    single = isinstance(fwd, ForwardTrajectory)
    grid = adj.grid
    tgrid = adj.tgrid
    rhs = _duality_rhs(grid, tgrid, adj, controls, gamma0)
    if single:
        lhs = _duality_lhs(grid, fwd, adj, y0, yhat0)
        ci = 0.0
    else:
        stats = EnsembleStats()
        stats.add_many(np.array([_duality_lhs(grid, f, adj, y0, yhat0)
                                 for f in fwd]))
        lhs, ci = stats.mean, stats.ci_halfwidth
    scale = max(abs(lhs), abs(rhs), RESIDUAL_FLOOR)
    degenerate = max(abs(lhs), abs(rhs)) < RESIDUAL_FLOOR
    return TranspositionReport(residual=abs(lhs - rhs) / scale, lhs=lhs,
                               rhs=rhs, degenerate=degenerate, lhs_ci=ci)


@dataclass
class EnergyReport:
    drift_wave: float        # relative drift of the conserved wave energy
    fitted_C: float          # smallest C in the two-sided e^{+-C(r2+1)T} band
    forward_bound_ok: bool
    backward_bound_ok: bool
    degenerate: bool
    energies: np.ndarray     # E(t_k) = |zhat|^2 + |grad z|^2 + |z|^2


def energy_check(traj: AdjointTrajectory, coeffs: CoefficientSet,
                 r2: float | None = None) -> EnergyReport:
    grid, tgrid = traj.grid, traj.tgrid
    if r2 is None:
        r2 = coeffs.r2(tgrid)
    nt = tgrid.nt
    E = np.empty(nt + 1)
    Ewave = np.empty(nt + 1)
    combo = np.empty(nt + 1)
    for k in range(nt + 1):
        zk, zhk = traj.z[k], traj.zhat[k]
        wave = l2_norm(grid, zhk) ** 2 + h01_seminorm_sq(grid, zk)
        Ewave[k] = wave
        E[k] = wave + l2_norm(grid, zk) ** 2
        combo[k] = (l2_norm(grid, traj.combo_g[k]) ** 2
                    + h01_seminorm_sq(grid, traj.combo_g[k])
                    + l2_norm(grid, traj.combo_f[k]) ** 2)

    ET = E[-1]
    if ET < 1e-300:
        return EnergyReport(0.0, 0.0, True, True, True, E)

    drift = float(np.max(np.abs(Ewave - Ewave[-1])) / max(Ewave[-1], 1e-300))

    # right tail integrals int_t^T combo ds (trapezoid, cumulative from T)
    dt = tgrid.dt
    tail = np.zeros(nt + 1)
    for k in range(nt - 1, -1, -1):
        tail[k] = tail[k + 1] + 0.5 * dt * (combo[k] + combo[k + 1])

    denom = (r2 + 1.0) * tgrid.T
    c_forward = 0.0
    c_backward = 0.0
    for k in range(nt + 1):
        lower = E[k] + tail[k]
        if lower > 0.0 and ET > lower:
            c_forward = max(c_forward, np.log(ET / lower) / denom)
        if E[k] > ET:
            c_backward = max(c_backward, np.log(E[k] / ET) / denom)
    fitted = float(max(c_forward, c_backward))
    return EnergyReport(drift_wave=drift, fitted_C=fitted,
                        forward_bound_ok=np.isfinite(c_forward),
                        backward_bound_ok=np.isfinite(c_backward),
                        degenerate=False, energies=E)
