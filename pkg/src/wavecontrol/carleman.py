"""Pointwise weighted identity lab and the Carleman-estimate ratio.

For theta = e^ell, v = theta u, vhat = theta uhat + ell_t v and the multiplier
G = -2 ell_t vhat + 2 grad(ell).grad(v) + Psi v, the identity reads

  theta G (duhat - lap u dt) + div V dt + dM
    = [ (ell_tt + lap ell - Psi) vhat^2 + (ell_tt - lap ell + Psi)|grad v|^2
        + 2 sum ell_{jk} v_j v_k - 4 grad(ell_t).grad(v) vhat
        + B v^2 + G^2 ] dt + N + (martingale) dW,

with
  A = ell_t^2 - ell_tt - |grad ell|^2 + lap ell - Psi,
  M = ell_t vhat^2 + ell_t |grad v|^2 - 2 grad(ell).grad(v) vhat - Psi v vhat
      + (A ell_t + Psi_t/2) v^2,
  B = A Psi + (A ell_t)_t - div(A grad ell) + (Psi_tt - lap Psi)/2,
  V = 2 (grad ell . grad v) grad v - grad ell |grad v|^2 - 2 ell_t grad v vhat
      + grad ell vhat^2 + Psi v grad v - (grad Psi) v^2 / 2 - A v^2 grad ell,
  N = the quadratic-variation group (exact once the diffusion of u is known).

The factor 2 on the grad(ell).grad(v) vhat term of M is required: with
factor 1 the two sides provably differ (symbolically verified in 1D and 2D);
all other groups are as printed.  Derivatives of derived fields (Psi_t, div V,
M_t, the B pieces) are taken by second-order finite differences; the residual
then converges at second order on smooth inputs, which is the certification.

Psi is the canonical choice
  Psi = -ell_tt + lap ell
        - 4 n lam mu alpha^2 beta^2 phi e^{alpha beta tau^2} tau^2
        - 2 n lam mu alpha beta phi e^{alpha beta tau^2}
        - 4 lam mu beta^2 phi sum_i e^{beta d_i^2} d_i^2
        - 2 lam mu beta phi sum_i e^{beta d_i^2}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adjoint import AdjointTrajectory
from .coefficients import CoefficientSet
from .geometry import CarlemanParams, GeometrySpec
from .grid import Face, Grid, face_integral
from .noise import Ensemble, EnsembleStats
from .timegrid import TimeGrid
from .weights import CutoffFunction, WeightField, _tshape


# -- small FD helpers over (nt+1, *space) arrays --------------------------------

def _ddt(F: np.ndarray, dt: float) -> np.ndarray:
    return np.gradient(F, dt, axis=0, edge_order=2)


def _ddx(F: np.ndarray, grid: Grid, ax: int) -> np.ndarray:
    return np.gradient(F, grid.h[ax], axis=1 + ax, edge_order=2)


def _grad(F: np.ndarray, grid: Grid) -> list[np.ndarray]:
    return [_ddx(F, grid, ax) for ax in range(grid.ndim)]


def _lap_fd(F: np.ndarray, grid: Grid) -> np.ndarray:
    return sum(_ddx(_ddx(F, grid, ax), grid, ax) for ax in range(grid.ndim))


# -- Psi and the ingredient fields ----------------------------------------------

def psi_field(weights: WeightField, geom: GeometrySpec) -> np.ndarray:
    p = weights.params
    n = geom.n
    lam, mu, beta, alpha = p.lam, p.mu, p.beta, p.alpha
    te = _tshape(weights.time_exp, n)
    tau = _tshape(weights.tau, n)
    phi = weights.phi
    return (-weights.ell_tt + weights.lap_ell
            - 4.0 * n * lam * mu * alpha ** 2 * beta ** 2 * phi * te * tau ** 2
            - 2.0 * n * lam * mu * alpha * beta * phi * te
            - 4.0 * lam * mu * beta ** 2 * phi * weights.sum_e_d2[None, ...]
            - 2.0 * lam * mu * beta * phi * weights.sum_e[None, ...])


def amplitude_A(weights: WeightField, psi: np.ndarray) -> np.ndarray:
    """A = ell_t^2 - ell_tt - |grad ell|^2 + lap ell - Psi (exact partials)."""
    g2 = sum(g * g for g in weights.grad_ell)
    return weights.ell_t ** 2 - weights.ell_tt - g2 + weights.lap_ell - psi


def amplitude_A_leading(weights: WeightField, geom: GeometrySpec) -> np.ndarray:
    """Leading lambda^2 mu^2 part: ell_t^2 - |grad ell|^2
    = 4 lam^2 mu^2 beta^2 phi^2 [alpha^2 n^2 e^{2 a b tau^2} tau^2 - sum e^{2bd^2} d^2]."""
    p = weights.params
    n = geom.n
    te = _tshape(weights.time_exp, n)
    tau = _tshape(weights.tau, n)
    return 4.0 * p.lam ** 2 * p.mu ** 2 * p.beta ** 2 * weights.phi ** 2 * (
        p.alpha ** 2 * n ** 2 * te ** 2 * tau ** 2
        - weights.sum_e2_d2[None, ...])


def transform(adj: AdjointTrajectory, cutoff: CutoffFunction):
    """(u, uhat) = (chi z, chi_t z + chi zhat)."""
    u = cutoff.chi * adj.z
    uhat = cutoff.chi_t * adj.z + cutoff.chi * adj.zhat
    return u, uhat


def transform_residual(adj: AdjointTrajectory, cutoff: CutoffFunction) -> float:
    """Max-norm residual of du = uhat dt (deterministic mode) by centered
    differences; O(dt^2) on smooth trajectories."""
    u, uhat = transform(adj, cutoff)
    dt = adj.tgrid.dt
    du = (u[2:] - u[:-2]) / (2.0 * dt)
    res = np.abs(du - uhat[1:-1])
    scale = float(np.max(np.abs(uhat))) + 1e-30
    return float(np.max(res)) / scale


@dataclass
class IdentityIngredients:
    """All fields of the weighted identity for one transformed trajectory."""

    psi: np.ndarray
    A: np.ndarray
    B: np.ndarray           # finite-difference realization
    M: np.ndarray
    N_dt: np.ndarray        # quadratic-variation density (zero when U = 0)
    V: list[np.ndarray]
    v: np.ndarray
    vhat: np.ndarray
    grad_v: list[np.ndarray]
    G: np.ndarray           # the multiplier
    K: np.ndarray | None = None
    Khat: np.ndarray | None = None


def _core_fields(weights: WeightField, psi: np.ndarray, v: np.ndarray,
                 vhat: np.ndarray, grad_v: list[np.ndarray],
                 U_diffusion: np.ndarray | None = None) -> IdentityIngredients:
    grid = weights.grid
    dt = weights.tgrid.dt
    n = grid.ndim
    lt = weights.ell_t
    gl = weights.grad_ell

    A = amplitude_A(weights, psi)
    G = -2.0 * lt * vhat + 2.0 * sum(g * gv for g, gv in zip(gl, grad_v)) + psi * v
    psi_t = _ddt(psi, dt)
    M = (lt * vhat ** 2 + lt * sum(gv * gv for gv in grad_v)
         - 2.0 * sum(g * gv for g, gv in zip(gl, grad_v)) * vhat
         - psi * v * vhat + (A * lt + 0.5 * psi_t) * v ** 2)
    gv2 = sum(gv * gv for gv in grad_v)
    grad_psi = _grad(psi, grid)
    V = [2.0 * sum(g * gv for g, gv in zip(gl, grad_v)) * grad_v[i]
         - gl[i] * gv2 - 2.0 * lt * grad_v[i] * vhat + gl[i] * vhat ** 2
         + psi * v * grad_v[i] - 0.5 * grad_psi[i] * v ** 2 - A * v ** 2 * gl[i]
         for i in range(n)]
    B = (A * psi + _ddt(A * lt, dt)
         - sum(_ddx(A * gl[i], grid, i) for i in range(n))
         + 0.5 * (_ddt(psi_t, dt) - _lap_fd(psi, grid)))

    if U_diffusion is None:
        N_dt = np.zeros_like(v)
    else:
        theta = weights.theta()
        thU = theta * U_diffusion
        g_thU = _grad(thU, grid)
        N_dt = (lt * (lt * thU) ** 2
                - 2.0 * sum(g * gt for g, gt in zip(gl, g_thU)) * (lt * thU)
                - psi * thU * (lt * thU)
                + lt * sum(gt * gt for gt in g_thU)
                + A * lt * thU ** 2 + 0.5 * psi_t * thU ** 2)
    return IdentityIngredients(psi=psi, A=A, B=B, M=M, N_dt=N_dt, V=V, v=v,
                               vhat=vhat, grad_v=grad_v, G=G)


def assemble_ingredients(weights: WeightField, cutoff: CutoffFunction,
                         adj: AdjointTrajectory, coeffs: CoefficientSet,
                         geom: GeometrySpec) -> IdentityIngredients:
    """Ingredients for the transformed backward trajectory u = chi z
    (deterministic mode: Z = Zhat = 0, so the diffusion of u vanishes)."""
    grid = weights.grid
    theta = weights.theta()
    u, uhat = transform(adj, cutoff)
    v = theta * u
    vhat = theta * uhat + weights.ell_t * v
    grad_v = [gl * v + theta * g for gl, g in
              zip(weights.grad_ell, _grad(u, grid))]
    psi = psi_field(weights, geom)
    ing = _core_fields(weights, psi, v, vhat, grad_v, U_diffusion=None)
    # observation combinations K = theta chi (a4 z + Z),
    # Khat = theta chi_t (a5 z + Z) + theta chi (a5 zhat + Zhat)
    #        + theta chi ell_t (a5 z + Z)
    a5z = np.empty_like(adj.z)
    for k, t in enumerate(weights.tgrid.nodes):
        a5z[k] = coeffs.eval("a5", float(t)) * adj.z[k]
    ing.K = theta * cutoff.chi * adj.combo_g
    ing.Khat = (theta * cutoff.chi_t * a5z + theta * cutoff.chi * adj.combo_f
                + theta * cutoff.chi * weights.ell_t * a5z)
    return ing


# -- manufactured process for the identity check --------------------------------

@dataclass
class ManufacturedProcess:
    """u(t,x) with analytic derivatives, plus an optional time-independent
    diffusion U(x): the path realization is u + U W(t), so uhat = du/dt."""

    u: callable
    u_t: callable
    u_tt: callable
    grad_u: list
    lap_u: callable
    U: callable | None = None
    grad_U: list | None = None
    lap_U: callable | None = None


def polynomial_bump_1d() -> ManufacturedProcess:
    """u = (1 + t + t^2/2) x^2 (1 - x)^2, U = x(1 - x)."""
    q = lambda t: 1.0 + t + 0.5 * t ** 2
    qt = lambda t: 1.0 + t
    s = lambda x: x ** 2 * (1.0 - x) ** 2
    sx = lambda x: 2.0 * x * (1.0 - x) * (1.0 - 2.0 * x)
    sxx = lambda x: 2.0 * (1.0 - 6.0 * x + 6.0 * x ** 2)
    return ManufacturedProcess(
        u=lambda t, X: q(t) * s(X[0]),
        u_t=lambda t, X: qt(t) * s(X[0]),
        u_tt=lambda t, X: s(X[0]) + 0.0 * X[0],
        grad_u=[lambda t, X: q(t) * sx(X[0])],
        lap_u=lambda t, X: q(t) * sxx(X[0]),
        U=lambda X: X[0] * (1.0 - X[0]),
        grad_U=[lambda X: 1.0 - 2.0 * X[0]],
        lap_U=lambda X: -2.0 * np.ones_like(X[0]),
    )


def _eval_timespace(fn, tgrid: TimeGrid, grid: Grid) -> np.ndarray:
    out = np.empty((tgrid.nt + 1,) + grid.shape)
    for k, t in enumerate(tgrid.nodes):
        out[k] = fn(float(t), grid.meshes)
    return out


@dataclass
class IdentityResidualReport:
    max_rel: float
    l2_rel: float
    scale: float


def identity_residual_deterministic(weights: WeightField, geom: GeometrySpec,
                                    proc: ManufacturedProcess) -> IdentityResidualReport:
    """Pointwise residual of the identity for a smooth deterministic u
    (U = 0), measured on the interior of the space-time grid."""
    grid, tgrid = weights.grid, weights.tgrid
    theta = weights.theta()
    u = _eval_timespace(proc.u, tgrid, grid)
    u_t = _eval_timespace(proc.u_t, tgrid, grid)
    u_tt = _eval_timespace(proc.u_tt, tgrid, grid)
    lap_u = _eval_timespace(proc.lap_u, tgrid, grid)
    grad_u = [_eval_timespace(g, tgrid, grid) for g in proc.grad_u]

    v = theta * u
    vhat = theta * u_t + weights.ell_t * v
    grad_v = [gl * v + theta * gu for gl, gu in zip(weights.grad_ell, grad_u)]
    psi = psi_field(weights, geom)
    ing = _core_fields(weights, psi, v, vhat, grad_v)

    dt = tgrid.dt
    lhs = (theta * ing.G * (u_tt - lap_u)
           + sum(_ddx(ing.V[i], grid, i) for i in range(grid.ndim))
           + _ddt(ing.M, dt))
    qf = _quadratic_form(weights, psi, vhat, grad_v)
    rhs = qf + ing.B * v ** 2 + ing.G ** 2

    sl = (slice(2, -2),) + (slice(2, -2),) * grid.ndim
    res = (lhs - rhs)[sl]
    scale = float(np.max(np.abs(rhs[sl]))) + 1e-30
    l2 = float(np.sqrt(np.mean(res ** 2)))
    return IdentityResidualReport(max_rel=float(np.max(np.abs(res))) / scale,
                                  l2_rel=l2 / scale, scale=scale)


def _quadratic_form(weights: WeightField, psi, vhat, grad_v) -> np.ndarray:
    n = weights.grid.ndim
    ltt, lap_l = weights.ell_tt, weights.lap_ell
    qf = ((ltt + lap_l - psi) * vhat ** 2
          + (ltt - lap_l + psi) * sum(g * g for g in grad_v))
    for i in range(n):
        for j in range(n):
            qf = qf + 2.0 * weights.hess_ell[i][j] * grad_v[i] * grad_v[j]
    qf = qf - 4.0 * sum(gt * gv for gt, gv in zip(weights.grad_ell_t, grad_v)) * vhat
    return qf


# -- Monte Carlo integrated identity -------------------------------------------

class _Poly2:
    """Space-time field c0 + c1 W + c2 W^2 (W scalar per time node)."""

    __slots__ = ("c0", "c1", "c2")
    __array_ufunc__ = None  # keep numpy from absorbing us; defer to __rmul__

    def __init__(self, c0, c1=None, c2=None):
        self.c0 = c0
        self.c1 = np.zeros_like(c0) if c1 is None else c1
        self.c2 = np.zeros_like(c0) if c2 is None else c2

    def __add__(self, other):
        if isinstance(other, _Poly2):
            return _Poly2(self.c0 + other.c0, self.c1 + other.c1, self.c2 + other.c2)
        return _Poly2(self.c0 + other, self.c1.copy(), self.c2.copy())

    __radd__ = __add__

    def __sub__(self, other):
        return self + (other * -1.0)

    def __mul__(self, other):
        if isinstance(other, _Poly2):
            deg_self = 2 if np.any(self.c2) else (1 if np.any(self.c1) else 0)
            deg_other = 2 if np.any(other.c2) else (1 if np.any(other.c1) else 0)
            if deg_self + deg_other > 2:
                raise ValueError("product degree exceeds 2 in W")
            return _Poly2(self.c0 * other.c0,
                          self.c0 * other.c1 + self.c1 * other.c0,
                          self.c0 * other.c2 + self.c1 * other.c1 + self.c2 * other.c0)
        return _Poly2(self.c0 * other, self.c1 * other, self.c2 * other)

    __rmul__ = __mul__

    def apply(self, op):
        return _Poly2(op(self.c0), op(self.c1), op(self.c2))

    def reduce_space(self, w_spatial: np.ndarray, ndim: int):
        axes = tuple(range(1, 1 + ndim))
        return (np.sum(self.c0 * w_spatial, axis=axes),
                np.sum(self.c1 * w_spatial, axis=axes),
                np.sum(self.c2 * w_spatial, axis=axes))


def _trapezoid_weights(n_nodes: int, dt: float) -> np.ndarray:
    w = np.full(n_nodes, dt)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _space_weights(grid: Grid) -> np.ndarray:
    w = np.ones(grid.shape)
    for ax in range(grid.ndim):
        sl = [slice(None)] * grid.ndim
        sl[ax] = 0
        w[tuple(sl)] *= 0.5
        sl[ax] = -1
        w[tuple(sl)] *= 0.5
    return w * grid.cell_volume


@dataclass
class McIdentityReport:
    mean: float
    ci: float
    n_paths: int
    scale: float

    @property
    def within_ci(self) -> bool:
        return abs(self.mean) <= self.ci


def identity_residual_mc(weights: WeightField, geom: GeometrySpec,
                         proc: ManufacturedProcess, ensemble: Ensemble,
                         chunk: int = 256) -> McIdentityReport:
    """Monte Carlo mean of the time-space integrated identity residual.

    The path realization is u(t,x) + U(x) W(t): increments of M telescope
    exactly, dt-integrands are trapezoid sums, quadratic variations are exact
    in U, and the dW bracket is a left-point Ito sum, so every martingale term
    has exactly zero mean and the expected residual is pure discretization
    bias, which the confidence interval of the ensemble must cover.
    """
    if proc.U is None:
        raise ValueError("stochastic check needs a diffusion U")
    grid, tgrid = weights.grid, weights.tgrid
    nt, dt = tgrid.nt, tgrid.dt
    n = grid.ndim
    theta = weights.theta()
    lt = weights.ell_t
    gl = weights.grad_ell

    u0 = _eval_timespace(proc.u, tgrid, grid)
    u0_t = _eval_timespace(proc.u_t, tgrid, grid)
    u0_tt = _eval_timespace(proc.u_tt, tgrid, grid)
    lap_u0 = _eval_timespace(proc.lap_u, tgrid, grid)
    grad_u0 = [_eval_timespace(g, tgrid, grid) for g in proc.grad_u]
    Ux = np.broadcast_to(proc.U(grid.meshes), grid.shape)
    U = np.broadcast_to(Ux, (nt + 1,) + grid.shape).copy()
    grad_Ux = [np.broadcast_to(g(grid.meshes), grid.shape) for g in proc.grad_U]
    grad_U = [np.broadcast_to(g, (nt + 1,) + grid.shape).copy() for g in grad_Ux]
    lap_U = np.broadcast_to(proc.lap_U(grid.meshes), (nt + 1,) + grid.shape).copy()

    v = _Poly2(theta * u0, theta * U)
    vhat = _Poly2(theta * u0_t + lt * theta * u0, lt * theta * U)
    grad_v = [_Poly2(gl[i] * theta * u0 + theta * grad_u0[i],
                     gl[i] * theta * U + theta * grad_U[i])
              for i in range(n)]
    uhat_t = _Poly2(u0_tt)          # uhat = u0_t is deterministic
    lap_u = _Poly2(lap_u0, lap_U)

    psi = psi_field(weights, geom)
    A = amplitude_A(weights, psi)
    psi_t = _ddt(psi, dt)

    G = (-2.0 * lt) * vhat + sum((2.0 * gl[i]) * grad_v[i] for i in range(n)) + psi * v
    thetaG = theta * G

    M = (lt * (vhat * vhat)
         + lt * sum(gv * gv for gv in grad_v)
         + (-2.0) * sum(gl[i] * grad_v[i] for i in range(n)) * vhat
         + (-1.0) * psi * (v * vhat)
         + (A * lt + 0.5 * psi_t) * (v * v))
    gv2 = sum(gv * gv for gv in grad_v)
    V = [2.0 * sum(gl[j] * grad_v[j] for j in range(n)) * grad_v[i]
         + (-1.0) * gl[i] * gv2 + (-2.0 * lt) * (grad_v[i] * vhat)
         + gl[i] * (vhat * vhat) + psi * (v * grad_v[i])
         + (-0.5 * _grad(psi, grid)[i]) * (v * v)
         + (-1.0) * (A * gl[i]) * (v * v)
         for i in range(n)]
    divV = sum(V[i].apply(lambda F, _i=i: _ddx(F, grid, _i)) for i in range(n))

    B = (A * psi + _ddt(A * lt, dt)
         - sum(_ddx(A * gl[i], grid, i) for i in range(n))
         + 0.5 * (_ddt(psi_t, dt) - _lap_fd(psi, grid)))
    qf = ((weights.ell_tt + weights.lap_ell - psi) * (vhat * vhat)
          + (weights.ell_tt - weights.lap_ell + psi) * gv2)
    for i in range(n):
        for j in range(n):
            qf = qf + (2.0 * weights.hess_ell[i][j]) * (grad_v[i] * grad_v[j])
    qf = qf + (-4.0) * sum(weights.grad_ell_t[i] * grad_v[i] for i in range(n)) * vhat
    rhs_dt = qf + B * (v * v) + G * G

    # quadratic variation density (deterministic in the prescribed-U setup)
    thU = theta * U
    g_thU = [gl[i] * thU + theta * grad_U[i] for i in range(n)]
    N_dens = (lt * (lt * thU) ** 2
              - 2.0 * sum(gl[i] * g_thU[i] for i in range(n)) * (lt * thU)
              - psi * thU * (lt * thU)
              + lt * sum(g * g for g in g_thU)
              + A * lt * thU ** 2 + 0.5 * psi_t * thU ** 2)

    # dW bracket (negated on the right-hand side)
    bracket = (thetaG * (lt * U)
               + sum((2.0 * g_thU[i] * gl[i]) * vhat for i in range(n))
               + (-theta * psi_t * U) * v
               + (theta * psi * U) * vhat
               + (-2.0) * (sum(grad_v[i] * g_thU[i] for i in range(n))
                           + (theta * A * U) * v) * lt)
    rhs_dW = (-1.0) * bracket

    w_x = _space_weights(grid)
    w_t = _trapezoid_weights(nt + 1, dt)

    # spatially reduced coefficient time series
    space_axes = tuple(range(1, 1 + n))
    M0S, M1S, M2S = M.reduce_space(w_x, n)
    P0, P1 = thetaG.c0, thetaG.c1          # theta G, linear in W
    dU0 = u0_t[1:] - u0_t[:-1]             # exact increments of uhat
    s_inc0 = 0.5 * np.sum((P0[:-1] + P0[1:]) * dU0 * w_x, axis=space_axes)
    s_inc1a = 0.5 * np.sum(P1[:-1] * dU0 * w_x, axis=space_axes)
    s_inc1b = 0.5 * np.sum(P1[1:] * dU0 * w_x, axis=space_axes)

    lap_term = (-1.0) * (thetaG * lap_u)
    L0S, L1S, L2S = lap_term.reduce_space(w_x, n)
    D0S, D1S, D2S = divV.reduce_space(w_x, n)
    R0S, R1S, R2S = rhs_dt.reduce_space(w_x, n)
    N0S = np.sum(N_dens * w_x, axis=tuple(range(1, 1 + n)))
    W0S, W1S, W2S = rhs_dW.reduce_space(w_x, n)

    drift0 = L0S + D0S - R0S - N0S
    drift1 = L1S + D1S - R1S
    drift2 = L2S + D2S - R2S

    stats = EnsembleStats()
    scale_acc = 0.0
    done = 0
    while done < ensemble.n_paths:
        m = min(chunk, ensemble.n_paths - done)
        from .noise import sample_path
        incs = np.stack([sample_path(ensemble.base_seed, dt, nt, path_index=done + j).increments
                         for j in range(m)])
        W = np.concatenate([np.zeros((m, 1)), np.cumsum(incs, axis=1)], axis=1)

        term_M = (M0S[-1] + M1S[-1] * W[:, -1] + M2S[-1] * W[:, -1] ** 2) - M0S[0]
        term_inc = (np.sum(s_inc0)
                    + W[:, :-1] @ s_inc1a + W[:, 1:] @ s_inc1b)
        term_drift = (np.sum(w_t * drift0)
                      + W @ (w_t * drift1) + (W ** 2) @ (w_t * drift2))
        term_mart = incs @ W0S[:-1] + np.sum(incs * W[:, :-1] * W1S[None, :-1], axis=1)
        vals = term_M + term_inc + term_drift - term_mart
        stats.add_many(vals)
        scale_acc = max(scale_acc, float(np.max(np.abs(np.sum(w_t * R0S)))))
        done += m

    return McIdentityReport(mean=stats.mean, ci=stats.ci_halfwidth,
                            n_paths=stats.count, scale=scale_acc + 1e-30)


# -- positivity checks -----------------------------------------------------------

@dataclass
class PositivityReport:
    checked_nodes: int
    violations: int
    min_margin: float

    @property
    def ok(self) -> bool:
        return self.violations == 0


def positivity_quadratic_form(weights: WeightField, geom: GeometrySpec,
                              psi: np.ndarray | None = None) -> PositivityReport:
    """Min-eigenvalue certification on Q(c1) of the key bound: the identity's
    order-two block dominates [4 c0 lam mu beta^2 phi + 2 lam mu beta phi (1-alpha)]
    (sum_i e^{beta d_i^2}) (|grad v|^2 + vhat^2) for every direction."""
    grid = weights.grid
    p = weights.params
    n = grid.ndim
    if psi is None:
        psi = psi_field(weights, geom)
    mask = weights.sigma > p.c1
    if not np.any(mask):
        return PositivityReport(0, 0, np.inf)

    R = ((4.0 * p.c0 * p.lam * p.mu * p.beta ** 2
          + 2.0 * p.lam * p.mu * p.beta * (1.0 - p.alpha)) * weights.phi
         * weights.sum_e[None, ...])

    a_hat = (weights.ell_tt + weights.lap_ell - psi - R)[mask]
    a_w = (weights.ell_tt - weights.lap_ell + psi - R)[mask]
    K = a_hat.shape[0]
    Mmat = np.zeros((K, n + 1, n + 1))
    Mmat[:, 0, 0] = a_hat
    for i in range(n):
        for j in range(n):
            Mmat[:, 1 + i, 1 + j] = 2.0 * weights.hess_ell[i][j][mask]
        Mmat[:, 1 + i, 1 + i] += a_w
        cross = -2.0 * weights.grad_ell_t[i][mask]
        Mmat[:, 0, 1 + i] = cross
        Mmat[:, 1 + i, 0] = cross
    eigs = np.linalg.eigvalsh(Mmat)[:, 0]
    scale = float(np.max(np.abs(R[mask]))) + 1e-30
    tol = -1e-12 * scale
    return PositivityReport(checked_nodes=K,
                            violations=int(np.count_nonzero(eigs < tol)),
                            min_margin=float(eigs.min()))


def positivity_sampling(weights: WeightField, geom: GeometrySpec, rng,
                        n_samples: int = 64) -> PositivityReport:
    """Random-direction realization of the same bound (independent oracle)."""
    grid = weights.grid
    p = weights.params
    n = grid.ndim
    psi = psi_field(weights, geom)
    mask = weights.sigma > p.c1
    R = ((4.0 * p.c0 * p.lam * p.mu * p.beta ** 2
          + 2.0 * p.lam * p.mu * p.beta * (1.0 - p.alpha)) * weights.phi
         * weights.sum_e[None, ...])[mask]
    a_hat = (weights.ell_tt + weights.lap_ell - psi)[mask]
    a_w = (weights.ell_tt - weights.lap_ell + psi)[mask]
    hess = [[weights.hess_ell[i][j][mask] for j in range(n)] for i in range(n)]
    glt = [weights.grad_ell_t[i][mask] for i in range(n)]

    worst = np.inf
    violations = 0
    for _ in range(n_samples):
        direction = rng.standard_normal(n + 1)
        direction /= np.linalg.norm(direction)
        vh, w = direction[0], direction[1:]
        val = a_hat * vh ** 2 + a_w * np.dot(w, w)
        for i in range(n):
            for j in range(n):
                val = val + 2.0 * hess[i][j] * w[i] * w[j]
            val = val - 4.0 * glt[i] * w[i] * vh
        margin = val - R * (np.dot(w, w) + vh ** 2)
        worst = min(worst, float(margin.min()))
        violations += int(np.count_nonzero(margin < -1e-12 * np.abs(R).max()))
    return PositivityReport(checked_nodes=int(mask.sum()) * n_samples,
                            violations=violations, min_margin=worst)


def positivity_level_set_chain(weights: WeightField, geom: GeometrySpec) -> PositivityReport:
    """On Q(c1): sum e^{2 b d^2} d^2 - alpha^2 n^2 e^{2 a b tau^2} tau^2
    >= (c0 c1 / sqrt n)[(sum e^{2 b d^2})^{1/2} + sqrt n e^{a b tau^2}]."""
    p = weights.params
    n = geom.n
    mask = weights.sigma > p.c1
    if not np.any(mask):
        return PositivityReport(0, 0, np.inf)
    te = _tshape(weights.time_exp, n)
    tau = _tshape(weights.tau, n)
    lhs = (weights.sum_e2_d2[None, ...]
           - p.alpha ** 2 * n ** 2 * te ** 2 * tau ** 2)
    rhs = (p.c0 * p.c1 / np.sqrt(n)) * (
        np.sqrt(weights.sum_e2)[None, ...] + np.sqrt(n) * te)
    lhs_b = np.broadcast_to(lhs, weights.sigma.shape)[mask]
    rhs_b = np.broadcast_to(rhs, weights.sigma.shape)[mask]
    margin = lhs_b - rhs_b
    scale = float(np.abs(rhs_b).max()) + 1e-30
    return PositivityReport(checked_nodes=int(mask.sum()),
                            violations=int(np.count_nonzero(margin < -1e-12 * scale)),
                            min_margin=float(margin.min()))


def zero_order_lower_bound(weights: WeightField, geom: GeometrySpec,
                           B: np.ndarray) -> PositivityReport:
    """B >= (16 c0^2 c1^2 / n) lam^3 mu^4 beta^4 phi^3 sum e^{2 b d^2} on Q(c1)
    (holds once lam, mu clear moderate thresholds)."""
    p = weights.params
    n = geom.n
    mask = weights.sigma > p.c1
    bound = (16.0 * p.c0 ** 2 * p.c1 ** 2 / n) * (
        p.lam ** 3 * p.mu ** 4 * p.beta ** 4 * weights.phi ** 3
        * weights.sum_e2[None, ...])
    margin = (B - np.broadcast_to(bound, B.shape))[mask]
    scale = float(np.abs(bound).max()) + 1e-30
    return PositivityReport(checked_nodes=int(mask.sum()),
                            violations=int(np.count_nonzero(margin < -1e-9 * scale)),
                            min_margin=float(margin.min()))


# -- Carleman ratio --------------------------------------------------------------

@dataclass
class CarlemanRatioReport:
    lhs: float           # scaled by e^{-log_scale}
    rhs_cutoff: float
    rhs_observation: float
    rhs_boundary: float
    ratio: float
    log_scale: float
    degenerate: bool

    @property
    def rhs(self) -> float:
        return self.rhs_cutoff + self.rhs_observation + self.rhs_boundary


def carleman_ratio(adj: AdjointTrajectory, weights: WeightField,
                   cutoff: CutoffFunction, coeffs: CoefficientSet,
                   gamma0: tuple[Face, ...]) -> CarlemanRatioReport:
    """Both sides of the weighted estimate (without the unknown constant),
    all theta^2 factors scaled by e^{-2 max ell} so nothing overflows."""
    grid, tgrid = weights.grid, weights.tgrid
    n = grid.ndim
    p = weights.params
    lam, mu = p.lam, p.mu
    w2, log_scale = weights.theta_scaled_sq()
    phi = weights.phi
    w_x = _space_weights(grid)
    w_t = _trapezoid_weights(tgrid.nt + 1, tgrid.dt)
    wq = w_t.reshape((-1,) + (1,) * n) * w_x

    def integral(F):
        return float(np.sum(wq * F))

    u, uhat = transform(adj, cutoff)
    grad_u = _grad(u, grid)
    grad_z = _grad(adj.z, grid)
    grad_cg = _grad(adj.combo_g, grid)

    lhs = (lam ** 3 * mu ** 4 * integral(phi ** 3 * w2 * u ** 2)
           + lam * mu * integral(phi * w2 * (sum(g * g for g in grad_u) + uhat ** 2)))

    Theta = cutoff.theta_weight
    rhs1 = integral(Theta * phi * w2 * (lam ** 3 * mu ** 4 * phi ** 2 * adj.z ** 2
                                        + sum(g * g for g in grad_z)
                                        + adj.zhat ** 2))
    rhs2 = lam * mu ** 1.5 * integral(
        (Theta + cutoff.chi ** 2) * phi * w2
        * (lam ** 2 * mu ** 2.5 * phi ** 2 * adj.combo_g ** 2
           + sum(g * g for g in grad_cg) + adj.combo_f ** 2))

    rhs3 = 0.0
    for face in gamma0:
        tr = adj.trace[face]
        sl = (slice(None),) + grid.face_slice(face)
        face_w = grid.face_measure(face)
        vals = phi[sl] * w2[sl] * tr ** 2
        per_node = np.array([float(np.sum(face_w * v)) for v in vals])
        rhs3 += lam * mu * float(np.trapezoid(per_node, dx=tgrid.dt))

    rhs = rhs1 + rhs2 + rhs3
    degenerate = max(abs(lhs), abs(rhs)) < 1e-290
    ratio = lhs / rhs if rhs > 0 else np.inf
    return CarlemanRatioReport(lhs=lhs, rhs_cutoff=rhs1, rhs_observation=rhs2,
                               rhs_boundary=rhs3, ratio=float(ratio),
                               log_scale=log_scale, degenerate=degenerate)
