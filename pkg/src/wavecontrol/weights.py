"""Carleman weight fields and the level-set cutoff on a space-time grid.

sigma(t,x) = sum_i e^{beta (x_i - x0_i)^2} - n e^{alpha beta (t - T/2)^2}
phi = e^{mu sigma},  ell = lam phi,  theta = e^ell.

All partial derivatives are analytic chain-rule evaluations of this
composition; the finite-difference convergence tests pin them at second
order.  theta is doubly exponential, so consumers work with ell (= log theta)
whenever exp would overflow; saturation is counted, never silent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CarlemanParams, GeometrySpec
from .grid import Grid
from .timegrid import TimeGrid

EXP_BUDGET = 700.0  # float64 exp overflow guard


def _tshape(arr: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a time array for broadcasting against (nt+1, *space)."""
    return arr.reshape((-1,) + (1,) * ndim)


@dataclass
class WeightField:
    """sigma/phi/ell/theta with analytic partials, plus reusable blocks."""

    grid: Grid
    tgrid: TimeGrid
    params: CarlemanParams

    sigma: np.ndarray = field(repr=False, default=None)
    phi: np.ndarray = field(repr=False, default=None)
    ell: np.ndarray = field(repr=False, default=None)
    ell_t: np.ndarray = field(repr=False, default=None)
    ell_tt: np.ndarray = field(repr=False, default=None)
    grad_ell: list = field(repr=False, default=None)
    hess_ell: list = field(repr=False, default=None)       # nested [i][j]
    grad_ell_t: list = field(repr=False, default=None)
    lap_ell: np.ndarray = field(repr=False, default=None)

    sigma_t: np.ndarray = field(repr=False, default=None)
    sigma_tt: np.ndarray = field(repr=False, default=None)
    grad_sigma: list = field(repr=False, default=None)      # space arrays
    hess_sigma: list = field(repr=False, default=None)

    # geometry blocks (space or time arrays, see eval_weights)
    e_beta: list = field(repr=False, default=None)          # e^{beta d_i^2}
    sum_e: np.ndarray = field(repr=False, default=None)
    sum_e_d2: np.ndarray = field(repr=False, default=None)  # sum e^{b d^2} d^2
    sum_e2: np.ndarray = field(repr=False, default=None)    # sum e^{2 b d^2}
    sum_e2_d2: np.ndarray = field(repr=False, default=None)
    tau: np.ndarray = field(repr=False, default=None)       # t - T/2
    time_exp: np.ndarray = field(repr=False, default=None)  # e^{a b tau^2}

    saturated_phi: int = 0
    saturated_theta: int = 0

    def theta(self) -> np.ndarray:
        """e^ell with overflow clipping; check ``saturated_theta`` first."""
        return np.exp(np.minimum(self.ell, EXP_BUDGET))

    def theta_scaled_sq(self) -> tuple[np.ndarray, float]:
        """(e^{2(ell - m)}, 2m) with m = max ell: overflow-free theta^2 up to
        the common factor e^{2m}, which cancels in ratios."""
        m = float(self.ell.max())
        return np.exp(2.0 * (self.ell - m)), 2.0 * m


def eval_weights(params: CarlemanParams, geom: GeometrySpec, grid: Grid,
                 tgrid: TimeGrid) -> WeightField:
    """Fill sigma, phi, ell and every analytic partial on the space-time grid."""
    n = geom.n
    beta, lam, mu, alpha = params.beta, params.lam, params.mu, params.alpha
    w = WeightField(grid=grid, tgrid=tgrid, params=params)

    meshes = grid.meshes
    d = [meshes[i] - geom.x0[i] for i in range(n)]
    e_beta = [np.exp(beta * di ** 2) for di in d]
    w.e_beta = e_beta
    w.sum_e = sum(e_beta)
    w.sum_e_d2 = sum(e * di ** 2 for e, di in zip(e_beta, d))
    w.sum_e2 = sum(e * e for e in e_beta)
    w.sum_e2_d2 = sum(e * e * di ** 2 for e, di in zip(e_beta, d))

    ts = tgrid.nodes
    tau = ts - geom.T / 2.0
    time_exp = np.exp(alpha * beta * tau ** 2)
    w.tau, w.time_exp = tau, time_exp

    tb = _tshape(time_exp, n)
    w.sigma = w.sum_e[None, ...] - n * tb

    st = -2.0 * n * alpha * beta * _tshape(tau, n) * tb
    stt = -2.0 * n * alpha * beta * tb * (1.0 + 2.0 * alpha * beta * _tshape(tau, n) ** 2)
    w.sigma_t = np.broadcast_to(st, w.sigma.shape).copy()
    w.sigma_tt = np.broadcast_to(stt, w.sigma.shape).copy()

    w.grad_sigma = [2.0 * beta * di * e for di, e in zip(d, e_beta)]
    w.hess_sigma = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i == j:
                w.hess_sigma[i][j] = 2.0 * beta * e_beta[i] * (1.0 + 2.0 * beta * d[i] ** 2)
            else:
                w.hess_sigma[i][j] = np.zeros(grid.shape)

    arg = mu * w.sigma
    w.saturated_phi = int(np.count_nonzero(arg > EXP_BUDGET))
    w.phi = np.exp(np.minimum(arg, EXP_BUDGET))
    w.ell = lam * w.phi
    w.saturated_theta = int(np.count_nonzero(w.ell > EXP_BUDGET))

    lmphi = lam * mu * w.phi
    w.ell_t = lmphi * w.sigma_t
    w.ell_tt = lam * w.phi * (mu ** 2 * w.sigma_t ** 2 + mu * w.sigma_tt)
    w.grad_ell = [lmphi * gs[None, ...] for gs in w.grad_sigma]
    w.hess_ell = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            w.hess_ell[i][j] = lam * w.phi * (
                mu ** 2 * w.grad_sigma[i][None, ...] * w.grad_sigma[j][None, ...]
                + mu * w.hess_sigma[i][j][None, ...])
    w.grad_ell_t = [lam * mu ** 2 * w.phi * w.sigma_t * gs[None, ...]
                    for gs in w.grad_sigma]
    w.lap_ell = sum(w.hess_ell[i][i] for i in range(n))
    return w


# -- cutoff --------------------------------------------------------------------

def smoothstep(u: np.ndarray) -> np.ndarray:
    """C^2 quintic smoothstep: 0 for u<=0, 1 for u>=1, 10u^3-15u^4+6u^5 between."""
    uc = np.clip(u, 0.0, 1.0)
    return uc ** 3 * (10.0 - 15.0 * uc + 6.0 * uc ** 2)


def smoothstep_d1(u: np.ndarray) -> np.ndarray:
    uc = np.clip(u, 0.0, 1.0)
    inside = (u > 0.0) & (u < 1.0)
    return np.where(inside, 30.0 * uc ** 2 * (1.0 - uc) ** 2, 0.0)


def smoothstep_d2(u: np.ndarray) -> np.ndarray:
    uc = np.clip(u, 0.0, 1.0)
    inside = (u > 0.0) & (u < 1.0)
    return np.where(inside, 60.0 * uc * (1.0 - uc) * (1.0 - 2.0 * uc), 0.0)


class CutoffError(RuntimeError):
    pass


@dataclass
class CutoffFunction:
    """chi = S((sigma - c1)/delta): 1 on Q(c1+delta), 0 off Q(c1)."""

    chi: np.ndarray
    chi_t: np.ndarray
    chi_tt: np.ndarray
    grad_chi: list
    hess_chi: list
    theta_weight: np.ndarray   # |grad chi|^2 + chi_t^2 + sum |chi_{jk}|^2
    support_mask: np.ndarray   # sigma > c1
    plateau_mask: np.ndarray   # sigma >= c1 + delta


def build_cutoff(weights: WeightField, params: CarlemanParams) -> CutoffFunction:
    n = weights.grid.ndim
    c1, delta = params.c1, params.delta
    if delta <= 0.0:
        raise CutoffError("delta must be positive")
    u = (weights.sigma - c1) / delta
    plateau = u >= 1.0
    support = u > 0.0
    if not np.any(plateau):
        raise CutoffError("Q(c1+delta) is empty on this grid; delta too large "
                          "for the resolution")

    s1 = smoothstep_d1(u) / delta
    s2 = smoothstep_d2(u) / delta ** 2
    chi = smoothstep(u)
    chi_t = s1 * weights.sigma_t
    chi_tt = s2 * weights.sigma_t ** 2 + s1 * weights.sigma_tt
    grad_chi = [s1 * gs[None, ...] for gs in weights.grad_sigma]
    hess_chi = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            hess_chi[i][j] = (s2 * weights.grad_sigma[i][None, ...]
                              * weights.grad_sigma[j][None, ...]
                              + s1 * weights.hess_sigma[i][j][None, ...])
    theta_weight = chi_t ** 2 + sum(g * g for g in grad_chi)
    for i in range(n):
        for j in range(n):
            theta_weight = theta_weight + hess_chi[i][j] ** 2
    return CutoffFunction(chi=chi, chi_t=chi_t, chi_tt=chi_tt,
                          grad_chi=grad_chi, hess_chi=hess_chi,
                          theta_weight=theta_weight,
                          support_mask=support, plateau_mask=plateau)
