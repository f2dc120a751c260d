"""Moment functionals, a-priori bound monitors, and long-time verdicts.

Everything a solution is supposed to satisfy is checked here at the
discrete level: mass, the coefficient bounds |a| < 1 and 0 <= b <= 1,
b >= beta (parabolicity), the dissipation inequality for E = int p f^2,
the derivative bounds |alpha'|, |beta'| <= c0 beta with the induced lower
bound beta(t) >= beta(0) exp(-c0 t), and the sorting / aggregate-learning
behaviour of long runs (decay of phi = beta (int p^2 f^2)^3, decay of the
window masses, and the trailing behaviour of alpha and a).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .model import (
    ModelParams,
    ProbabilityFn,
    diffusion_coefficient,
    transport_coefficient,
)

if TYPE_CHECKING:  # pragma: no cover
    from .pde import CoefficientSet, Grid, KineticState


@dataclass
class MomentRecord:
    t: float
    mass: float
    alpha: float
    beta: float
    a: float
    b: float
    c: float
    d: float
    energy: float
    grad_energy: float
    phi: float
    sorting: dict
    bmass_left: float
    bmass_right: float


@dataclass
class MomentSeries:
    """Time-ordered moment records plus run provenance."""

    records: list
    params: ModelParams
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        ts = self.t
        if np.any(np.diff(ts) <= 0):
            raise ValueError("record times must be strictly increasing")

    @property
    def t(self):
        return np.array([r.t for r in self.records])

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def sorting_column(self, R):
        return np.array([r.sorting[R] for r in self.records])

    @property
    def sorting_windows(self):
        return sorted(self.records[0].sorting.keys())


def moments(state: "KineticState", grid: "Grid", pf: ProbabilityFn,
            params: ModelParams, sorting_windows=(1.0, 2.0),
            coeffs_override: "CoefficientSet" = None,
            p: np.ndarray = None) -> MomentRecord:
    """All moment functionals of a kinetic state by midpoint quadrature.

    coeffs_override lets a frozen-coefficient solve record the c and d it
    actually used instead of the state-induced values.
    """
    if p is None:
        p = np.atleast_1d(pf(grid.centers, 0))
    f = state.f
    dx = grid.dx
    w = f * dx
    mass = state.mass(grid)
    alpha = float(np.dot(p, w))
    alpha += state.escaped_right + state.escaped_left * float(pf(grid.x_min, 0))
    beta = float(np.dot(p * (1.0 - p), w))
    a = params.kappa - alpha
    b = alpha * (1.0 - alpha)
    if coeffs_override is not None:
        c, d = coeffs_override.c, coeffs_override.d
    else:
        c = transport_coefficient(a, params)
        d = diffusion_coefficient(a, b, params)
    g = p * f
    energy = float(np.dot(p, f * f) * dx)
    grad_energy = float(np.sum(np.diff(g) ** 2) / dx)
    phi = beta * float(np.dot(p * p, f * f) * dx) ** 3
    centers = grid.centers
    sorting = {
        float(R): float(f[np.abs(centers) < R].sum() * dx)
        for R in sorting_windows
    }
    return MomentRecord(
        t=state.t, mass=mass, alpha=alpha, beta=beta, a=a, b=b, c=c, d=d,
        energy=energy, grad_energy=grad_energy, phi=phi, sorting=sorting,
        bmass_left=float(f[0] * dx), bmass_right=float(f[-1] * dx),
    )


# ---------------------------------------------------------------------------
# A-priori monitors
# ---------------------------------------------------------------------------

@dataclass
class EnergyReport:
    """Discrete check of E(t_k) + sum_{j<k} d_j |grad g_j|^2 dt_j <= E(0)."""

    max_violation: float
    violations: list
    tol: float

    @property
    def ok(self) -> bool:
        return not self.violations


def check_energy_inequality(series: MomentSeries, tol: float = 1e-4,
                            d_values=None, grad_values=None) -> EnergyReport:
    """Verify the dissipation inequality along the recorded trajectory.

    The continuous identity loses energy at rate 2 d |grad(pf)|^2; the
    checked inequality only charges the factor-1 rate (as in the a-priori
    estimate), which leaves slack for quadrature and scheme consistency
    errors.  Violations are listed, not raised.
    """
    t = series.t
    E = series.column("energy")
    d = series.column("d") if d_values is None else np.asarray(d_values)
    ge = series.column("grad_energy") if grad_values is None else np.asarray(grad_values)
    dt = np.diff(t)
    dissipated = np.concatenate([[0.0], np.cumsum(d[:-1] * ge[:-1] * dt)])
    bound = E[0] * (1.0 + tol)
    lhs = E + dissipated
    violations = [
        (float(t[k]), float(lhs[k] - bound))
        for k in range(len(t)) if lhs[k] > bound
    ]
    max_violation = max((v for _, v in violations), default=0.0)
    return EnergyReport(max_violation=max_violation, violations=violations, tol=tol)


def assemble_c0(c_p: float, series: MomentSeries) -> float:
    """Assembled constant for the moment-derivative bounds.

    From the derivative conditions, |[p(1-p)]'| <= c_p (1-p) and
    |[p(1-p)]''| <= (c_p + 2 c_p^2)(1-p), so both |alpha'| and |beta'| are
    bounded by c_p (1 + 2 c_p) (sup|c| + sup d) * beta.  The suprema are
    taken over the realised run.
    """
    sup_c = float(np.max(np.abs(series.column("c"))))
    sup_d = float(np.max(series.column("d")))
    return c_p * (1.0 + 2.0 * c_p) * (sup_c + sup_d)


@dataclass
class BoundsReport:
    c0: float
    coefficient_violations: list   # |a|>=1, b outside [0,1], b < beta
    alpha_derivative_violations: list
    beta_derivative_violations: list
    beta_lower_bound_violations: list

    @property
    def ok(self) -> bool:
        return not (
            self.coefficient_violations
            or self.alpha_derivative_violations
            or self.beta_derivative_violations
            or self.beta_lower_bound_violations
        )


def check_moment_bounds(series: MomentSeries, c0: float,
                        fd_slack: float = 0.05, atol: float = 1e-10,
                        beta_lb_tol: float = 1e-6) -> BoundsReport:
    """Check the coefficient bounds and the moment-derivative bounds.

    Finite differences of alpha and beta between records are compared with
    c0 * beta; the interval supremum of beta is majorised by
    max(beta_k, beta_{k+1}) e^{c0 dt} capped at the global bound beta <= 1,
    and (1 + fd_slack) absorbs the scheme's consistency error.  The lower
    bound beta(t) >= beta(0) e^{-c0 t} (1 - beta_lb_tol) is pointwise.
    """
    t = series.t
    alpha = series.column("alpha")
    beta = series.column("beta")
    a = series.column("a")
    b = series.column("b")

    coeff_viol = []
    for k in range(len(t)):
        if not abs(a[k]) < 1.0:
            coeff_viol.append((float(t[k]), "a", float(a[k])))
        if not (0.0 <= b[k] <= 1.0):
            coeff_viol.append((float(t[k]), "b", float(b[k])))
        if b[k] < beta[k] - 1e-12:
            coeff_viol.append((float(t[k]), "b_vs_beta", float(b[k] - beta[k])))

    dts = np.diff(t)
    growth = np.exp(np.minimum(c0 * dts, 700.0))
    beta_sup = np.minimum(np.maximum(beta[:-1], beta[1:]) * growth, 1.0)
    alpha_fd = np.abs(np.diff(alpha)) / dts
    beta_fd = np.abs(np.diff(beta)) / dts
    bound = c0 * beta_sup * (1.0 + fd_slack) + atol
    alpha_viol = [
        (float(t[k + 1]), float(alpha_fd[k] - bound[k]))
        for k in range(len(dts)) if alpha_fd[k] > bound[k]
    ]
    beta_viol = [
        (float(t[k + 1]), float(beta_fd[k] - bound[k]))
        for k in range(len(dts)) if beta_fd[k] > bound[k]
    ]

    lb = beta[0] * np.exp(np.maximum(-c0 * t, -700.0)) * (1.0 - beta_lb_tol)
    lb_viol = [
        (float(t[k]), float(beta[k] - lb[k]))
        for k in range(len(t)) if beta[k] < lb[k]
    ]
    return BoundsReport(
        c0=c0,
        coefficient_violations=coeff_viol,
        alpha_derivative_violations=alpha_viol,
        beta_derivative_violations=beta_viol,
        beta_lower_bound_violations=lb_viol,
    )


# ---------------------------------------------------------------------------
# Long-time behaviour
# ---------------------------------------------------------------------------

@dataclass
class TimescaleReport:
    transport_rate: float
    diffusion_rate: float
    ratio: float          # transport_rate / diffusion_rate = 2/h
    T_learn: float
    T_sort: float
    C_T: float


def timescale_report(params: ModelParams, C_T: float = 10.0) -> TimescaleReport:
    """Characteristic rates of learning and sorting and suggested horizons.

    The transport coefficient scale h(M-1)/tau sets the aggregate-learning
    rate; the diffusion coefficient scale h^2(M-1)/(2 tau) sets the sorting
    rate; their ratio is 2/h, so slower per-round payoffs widen the gap.
    """
    tr = params.transport_rate
    dr = params.diffusion_rate
    return TimescaleReport(
        transport_rate=tr, diffusion_rate=dr, ratio=tr / dr,
        T_learn=C_T / tr, T_sort=C_T / dr, C_T=C_T,
    )


@dataclass
class AsymptoticsReport:
    conclusive: bool
    phi_final_ok: bool
    phi_decreasing_ok: bool
    phi_initial: float
    phi_final: float
    sorting_ok: dict            # R -> bool
    sorting_final: dict         # R -> value
    alpha_band_ok: bool
    alpha_band: tuple
    alpha_trailing_range: tuple
    a_surrogate_ok: bool        # labelled surrogate: uses bound_factor, not the paper constant
    a_surrogate_bound: float
    a_trailing_max: float
    regime_surrogate_ok: bool
    regime_lhs: float
    regime_rhs: float

    @property
    def all_ok(self) -> bool:
        checks = [self.phi_final_ok, self.phi_decreasing_ok,
                  self.alpha_band_ok, *self.sorting_ok.values()]
        if self.regime_surrogate_ok:
            checks.append(self.a_surrogate_ok)
        return self.conclusive and all(checks)


def sorting_and_learning_verdict(series: MomentSeries, params: ModelParams,
                                 pf: ProbabilityFn, phi_frac: float = 0.1,
                                 sorting_tol: float = 0.05,
                                 bound_factor: float = 1e-7,
                                 trailing_frac: float = 0.25) -> AsymptoticsReport:
    """Operational check of the long-time claims on a finite-horizon run.

    1. phi(T) <= phi_frac * phi(0) and phi trending down on the trailing half.
    2. sorting window masses below sorting_tol at the final time.
    3. alpha inside ((Mc-1)/M, Mc/M) over the trailing quarter of the run.
    4. max |a| over the trailing quarter <= bound_factor*sqrt(tau)/p_min^4.
       bound_factor is a configured surrogate for the non-constructive
       constant in the transport-dominance condition, so this is reported
       as a surrogate bound, and asserted only when check 5 holds.
    5. regime surrogate: bound_factor*sqrt(tau)*(M-1) < p_min^4.

    Limsup/liminf statements are operationalised with trailing windows; a
    series shorter than the sorting time scale is inconclusive, not failed.
    """
    t = series.t
    horizon = timescale_report(params).T_sort
    conclusive = t[-1] >= horizon and len(t) >= 8

    phi = series.column("phi")
    phi_final_ok = bool(phi[-1] <= phi_frac * phi[0])
    half = len(t) // 2
    slope = np.polyfit(t[half:], phi[half:], 1)[0] if len(t) - half >= 2 else 0.0
    phi_decreasing_ok = bool(slope <= 1e-9 * max(phi[0], 1e-300) / max(t[-1], 1e-300))

    sorting_final = {R: float(series.sorting_column(R)[-1])
                     for R in series.sorting_windows}
    sorting_ok = {R: bool(v <= sorting_tol) for R, v in sorting_final.items()}

    tail = t >= t[-1] * (1.0 - trailing_frac)
    alpha_tail = series.column("alpha")[tail]
    band = ((params.Mc - 1.0) / params.M, params.Mc / params.M)
    alpha_band_ok = bool(np.all((alpha_tail > band[0]) & (alpha_tail < band[1])))

    a_tail_max = float(np.max(np.abs(series.column("a")[tail])))
    p_min = pf.p_min
    if p_min > 0:
        a_bound = bound_factor * math.sqrt(params.tau) / p_min**4
        regime_lhs = bound_factor * math.sqrt(params.tau) * (params.M - 1)
        regime_rhs = p_min**4
        regime_ok = bool(regime_lhs < regime_rhs)
        a_ok = bool(a_tail_max <= a_bound)
    else:
        a_bound = math.inf
        regime_lhs, regime_rhs = math.inf, 0.0
        regime_ok = False
        a_ok = True

    return AsymptoticsReport(
        conclusive=bool(conclusive),
        phi_final_ok=phi_final_ok,
        phi_decreasing_ok=phi_decreasing_ok,
        phi_initial=float(phi[0]), phi_final=float(phi[-1]),
        sorting_ok=sorting_ok, sorting_final=sorting_final,
        alpha_band_ok=alpha_band_ok, alpha_band=band,
        alpha_trailing_range=(float(alpha_tail.min()), float(alpha_tail.max())),
        a_surrogate_ok=a_ok, a_surrogate_bound=float(a_bound),
        a_trailing_max=a_tail_max,
        regime_surrogate_ok=regime_ok,
        regime_lhs=float(regime_lhs), regime_rhs=float(regime_rhs),
    )


def first_crossing_time(t: np.ndarray, values: np.ndarray, predicate) -> float:
    """First record time at which predicate(value) holds, or nan."""
    for tk, vk in zip(t, values):
        if predicate(vk):
            return float(tk)
    return math.nan
