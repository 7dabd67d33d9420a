"""Geometric constants of the control problem and the Carleman parameter search.

The box G, the observation point x0 outside it, and kappa in (0,1) determine:
the observed boundary part Gamma_0 (faces where (x - x0).nu > 0), the radius
R1, the waiting time T* = 2 sqrt(n) R1 max_x sqrt(max_i d_i^2 / min_i d_i^2)
with d_i = x_i - x0_i, and alpha = (kappa^2/n) min_x (min_i d_i^2 / max_i d_i^2).

``choose_beta`` searches beta = C0 (1 + r2) over a geometric C0 grid until the
three admissibility conditions hold:
  (1) max_i d_i^2 < alpha T^2/4 on the closure of G,
  (2) min_i d_i^2 - n alpha^2 (t - T/2)^2 > c0 on {sigma > 0},
  (3) 4 c0 beta^2 + 2 beta (1 - alpha) - 4 r2 beta T > c0_tilde,
with c0 = (1-kappa^2)/2 min_{x,i} d_i^2,
     c0_tilde = (1-kappa^2)/(2 kappa^2) min_x max_i d_i^2,
     c1 = min_x sum_i e^{d_i^2} - n,
and then shrinks eps, delta from e^{-beta} until the level-set inclusion chain
(T/2-eps, T/2+eps) x G  in  Q(c1+2 delta)  in  Q(c1)  in  (eps, T-eps) x G
verifies on a dense grid.

Maxima/minima over the closure of G are evaluated by dense grid search; for a
box all extrema sit at per-axis endpoints, which the search grid contains, so
the values are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .grid import Face

DENSE_POINTS = 801          # per-axis nodes for closure(G) searches
DENSE_TIME_POINTS = 1601    # time nodes for the {sigma > 0} search
EPS_DELTA_MAX_HALVINGS = 80


class GeometryError(ValueError):
    pass


class BetaSearchError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeometrySpec:
    """Box domain, observation point, kappa and the horizon T."""

    bounds: tuple[tuple[float, float], ...]
    x0: tuple[float, ...]
    kappa: float
    T: float

    def __post_init__(self):
        n = len(self.bounds)
        if n not in (1, 2):
            raise GeometryError("spatial dimension must be 1 or 2")
        if len(self.x0) != n:
            raise GeometryError("x0 dimension mismatch")
        for (lo, hi), c in zip(self.bounds, self.x0):
            if not hi > lo:
                raise GeometryError(f"degenerate box axis [{lo}, {hi}]")
            if lo <= c <= hi:
                raise GeometryError(
                    "x0 must be separated from G in every coordinate")
        if not 0.0 < self.kappa < 1.0:
            raise GeometryError("kappa must lie in (0, 1)")
        if not self.T > 0.0:
            raise GeometryError("T must be positive")

    @property
    def n(self) -> int:
        return len(self.bounds)


@dataclass(frozen=True)
class ControlTimeReport:
    R1: float
    Tstar: float
    alpha: float
    gamma0: tuple[Face, ...]


@dataclass(frozen=True)
class CarlemanParams:
    beta: float
    lam: float
    mu: float
    alpha: float
    c0: float
    c0_tilde: float
    c1: float
    eps: float
    delta: float
    r2: float

    def with_weights(self, lam: float, mu: float) -> "CarlemanParams":
        return replace(self, lam=lam, mu=mu)


@dataclass(frozen=True)
class ConditionReport:
    cond1: bool
    cond2: bool
    cond3: bool
    margin1: float
    margin2: float
    margin3: float

    def all_ok(self) -> bool:
        return self.cond1 and self.cond2 and self.cond3


def _dense_axes(geom: GeometrySpec, points: int = DENSE_POINTS):
    return [np.linspace(lo, hi, points) for lo, hi in geom.bounds]


def _dsq_fields(geom: GeometrySpec, points: int = DENSE_POINTS):
    """(min_i d_i^2, max_i d_i^2) over a dense grid on closure(G)."""
    axes = _dense_axes(geom, points)
    d2 = [(ax - c) ** 2 for ax, c in zip(axes, geom.x0)]
    if geom.n == 1:
        return d2[0], d2[0]
    a, b = np.meshgrid(d2[0], d2[1], indexing="ij")
    return np.minimum(a, b), np.maximum(a, b)


def compute_report(geom: GeometrySpec, points: int = DENSE_POINTS) -> ControlTimeReport:
    """R1, T*, alpha and the observed faces for an admissible geometry."""
    dmin2, dmax2 = _dsq_fields(geom, points)
    R1 = float(np.sqrt(dmax2.max()))
    ratio_max = float((dmax2 / dmin2).max())
    Tstar = 2.0 * np.sqrt(geom.n) * R1 * np.sqrt(ratio_max)
    alpha = geom.kappa ** 2 / geom.n * float((dmin2 / dmax2).min())

    gamma0: list[Face] = []
    for ax, ((lo, hi), c) in enumerate(zip(geom.bounds, geom.x0)):
        # (x - x0).nu is constant per box face: hi - c on the high face,
        # c - lo on the low face.
        if hi - c > 0.0:
            gamma0.append((ax, 1))
        if c - lo > 0.0:
            gamma0.append((ax, 0))
    return ControlTimeReport(R1=R1, Tstar=float(Tstar), alpha=float(alpha),
                             gamma0=tuple(gamma0))


def structural_constants(geom: GeometrySpec, points: int = DENSE_POINTS):
    """(c0, c0_tilde, c1) by dense search (exact for boxes, extrema at corners)."""
    dmin2, dmax2 = _dsq_fields(geom, points)
    c0 = 0.5 * (1.0 - geom.kappa ** 2) * float(dmin2.min())
    c0_tilde = (1.0 - geom.kappa ** 2) / (2.0 * geom.kappa ** 2) * float(dmax2.min())
    axes = _dense_axes(geom, points)
    e_fields = [np.exp((ax - c) ** 2) for ax, c in zip(axes, geom.x0)]
    if geom.n == 1:
        sum_e = e_fields[0]
    else:
        sum_e = e_fields[0][:, None] + e_fields[1][None, :]
    c1 = float(sum_e.min()) - geom.n
    return c0, c0_tilde, c1


def sigma_value(geom: GeometrySpec, beta: float, alpha: float, t, x) -> np.ndarray:
    """Weight exponent sigma(t, x) = sum_i e^{beta d_i^2} - n e^{alpha beta (t-T/2)^2}.

    x may be a scalar (1D) or an array whose last axis indexes the coordinate.
    """
    xs = np.asarray(x, dtype=float)
    if geom.n == 1:
        space = np.exp(beta * (xs - geom.x0[0]) ** 2)
    else:
        space = sum(np.exp(beta * (xs[..., i] - geom.x0[i]) ** 2)
                    for i in range(geom.n))
    tau = np.asarray(t, dtype=float) - geom.T / 2.0
    return space - geom.n * np.exp(alpha * beta * tau ** 2)


def level_set_membership(geom: GeometrySpec, beta: float, alpha: float,
                         b: float, t, x) -> np.ndarray:
    """True where sigma(t, x) > b (strict)."""
    return sigma_value(geom, beta, alpha, t, x) > b


def verify_conditions(params: CarlemanParams, geom: GeometrySpec,
                      points: int = DENSE_POINTS,
                      time_points: int = DENSE_TIME_POINTS) -> ConditionReport:
    """Evaluate the three admissibility conditions with worst-case margins."""
    dmin2, dmax2 = _dsq_fields(geom, points)
    alpha, beta = params.alpha, params.beta

    margin1 = float((alpha * geom.T ** 2 / 4.0 - dmax2).min())
    cond1 = margin1 > 0.0

    # condition (2) over the region {sigma > 0}
    ts = np.linspace(0.0, geom.T, time_points)
    tau2 = (ts - geom.T / 2.0) ** 2
    axes = _dense_axes(geom, points)
    e_beta = [np.exp(beta * (ax - c) ** 2) for ax, c in zip(axes, geom.x0)]
    if geom.n == 1:
        sum_e = e_beta[0]
    else:
        sum_e = e_beta[0][:, None] + e_beta[1][None, :]
    flat_sum_e = sum_e.reshape(-1)
    flat_dmin2 = dmin2.reshape(-1)
    time_exp = geom.n * np.exp(alpha * beta * tau2)
    sigma = flat_sum_e[None, :] - time_exp[:, None]
    lhs2 = flat_dmin2[None, :] - geom.n * alpha ** 2 * tau2[:, None] - params.c0
    active = sigma > 0.0
    if np.any(active):
        margin2 = float(lhs2[active].min())
    else:
        margin2 = np.inf  # empty region: condition holds vacuously
    cond2 = margin2 > 0.0

    margin3 = (4.0 * params.c0 * beta ** 2 + 2.0 * beta * (1.0 - alpha)
               - 4.0 * params.r2 * beta * geom.T - params.c0_tilde)
    cond3 = margin3 > 0.0

    return ConditionReport(cond1, cond2, cond3, margin1, float(margin2),
                           float(margin3))


def _inclusions_hold(geom: GeometrySpec, beta: float, alpha: float, c1: float,
                     eps: float, delta: float, points: int = DENSE_POINTS) -> bool:
    """Level-set inclusion chain on a dense spatial grid.

    sigma is even in t - T/2 and decreasing in |t - T/2|, so the inner
    inclusion is worst at t = T/2 +- eps and the outer one at t = eps.
    """
    axes = _dense_axes(geom, points)
    e_beta = [np.exp(beta * (ax - c) ** 2) for ax, c in zip(axes, geom.x0)]
    if geom.n == 1:
        sum_e = e_beta[0]
    else:
        sum_e = e_beta[0][:, None] + e_beta[1][None, :]
    inner = sum_e.min() - geom.n * np.exp(alpha * beta * eps ** 2)
    if not inner > c1 + 2.0 * delta:
        return False
    tau_edge = geom.T / 2.0 - eps
    outer = sum_e.max() - geom.n * np.exp(alpha * beta * tau_edge ** 2)
    return outer <= c1


def choose_eps_delta(geom: GeometrySpec, beta: float, alpha: float, c1: float,
                     points: int = DENSE_POINTS) -> tuple[float, float]:
    """Shrink eps = delta from e^{-beta} by halving until the chain holds."""
    start = max(np.exp(-min(beta, 700.0)), 1e-300)
    eps = delta = float(start)
    for _ in range(EPS_DELTA_MAX_HALVINGS):
        if _inclusions_hold(geom, beta, alpha, c1, eps, delta, points):
            return eps, delta
        eps *= 0.5
        delta *= 0.5
    raise BetaSearchError("could not satisfy the level-set inclusion chain")


def choose_beta(geom: GeometrySpec, r2: float,
                report: ControlTimeReport | None = None,
                c0_exponents: range = range(-3, 14),
                beta_cap: float = 1e7,
                points: int = DENSE_POINTS) -> CarlemanParams:
    """Smallest beta = C0 (1+r2), C0 in {2^k}, passing all three conditions."""
    if r2 < 0.0:
        raise ValueError("r2 must be nonnegative")
    if report is None:
        report = compute_report(geom, points)
    if not geom.kappa * geom.T > report.Tstar:
        raise BetaSearchError(
            f"kappa*T = {geom.kappa * geom.T:g} must exceed T* = {report.Tstar:g}")
    c0, c0_tilde, c1 = structural_constants(geom, points)
    for k in c0_exponents:
        beta = float(2.0 ** k) * (1.0 + r2)
        if beta <= 1.0:
            continue
        if beta > beta_cap:
            break
        candidate = CarlemanParams(beta=beta, lam=1.0, mu=1.0,
                                   alpha=report.alpha, c0=c0,
                                   c0_tilde=c0_tilde, c1=c1,
                                   eps=1.0, delta=1.0, r2=r2)
        cr = verify_conditions(candidate, geom, points)
        if cr.all_ok():
            eps, delta = choose_eps_delta(geom, beta, report.alpha, c1, points)
            return replace(candidate, eps=eps, delta=delta)
    raise BetaSearchError(
        f"no beta below cap {beta_cap:g} satisfies the three conditions")
