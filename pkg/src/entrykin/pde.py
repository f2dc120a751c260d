"""Conservative finite-volume solver for the one-particle kinetic equation.

The density f of a randomly chosen agent's propensity obeys

    df/dt + c(t) d/dx (p f) - d(t) d2/dx2 (p f) = 0,
    c(t) = h (M-1) a(t) / tau,
    d(t) = (h^2 (M-1)^2 / 2 tau) (a(t)^2 + b(t)/(M-1)),

with a = kappa - alpha, b = alpha (1 - alpha), alpha = integral of p f.
The scheme is flux-form on a uniform grid: explicit first-order upwind for
the transport of g = p f, theta-implicit centered differences for the
diffusion of g (tridiagonal solve), coefficients lagged one step with
optional fixed-point refreshes.  Mass is conserved to rounding by
re-applying the realised face fluxes after the implicit solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import ndtr

from .model import (
    ModelParams,
    ProbabilityFn,
    diffusion_coefficient,
    regularize_p,
    transport_coefficient,
)


class MassViolationError(RuntimeError):
    pass


class ParabolicityError(RuntimeError):
    pass


class StepSizeError(RuntimeError):
    pass


class CFLError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform cell grid on [x_min, x_max]; the origin must be interior."""

    x_min: float
    x_max: float
    n_cells: int

    def __post_init__(self):
        if not (self.x_min < 0.0 < self.x_max):
            raise ValueError("grid must satisfy x_min < 0 < x_max")
        if self.n_cells < 16:
            raise ValueError(f"need at least 16 cells, got {self.n_cells}")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n_cells

    @property
    def edges(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.n_cells + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.x_min + self.dx * (0.5 + np.arange(self.n_cells))


@dataclass
class KineticState:
    """Cell-averaged density plus time and the escaped-mass ledger."""

    f: np.ndarray
    t: float = 0.0
    escaped_left: float = 0.0
    escaped_right: float = 0.0
    clipped_mass: float = 0.0  # cumulative |negative mass| removed by clipping

    def mass(self, grid: Grid) -> float:
        return float(self.f.sum() * grid.dx + self.escaped_left + self.escaped_right)


@dataclass(frozen=True)
class CoefficientSet:
    """Moment scalars and the induced transport/diffusion coefficients."""

    alpha: float
    beta: float
    a: float
    b: float
    c: float
    d: float


@dataclass(frozen=True)
class SolverConfig:
    theta: float = 1.0              # implicitness of diffusion, in [0.5, 1]
    dt_max: float = 0.02
    cfl_advection: float = 0.9      # in (0, 1]
    boundary_mode: str = "zero_flux"  # or "absorbing_ledger"
    epsilon: float = 0.0            # probability-floor regularisation
    picard_iters: int = 0           # coefficient refreshes per step
    mass_tol: float = 1e-8
    energy_tol: float = 1e-4

    def __post_init__(self):
        if not (0.5 <= self.theta <= 1.0):
            raise ValueError("theta must be in [0.5, 1]")
        if not (0.0 < self.cfl_advection <= 1.0):
            raise ValueError("cfl_advection must be in (0, 1]")
        if self.boundary_mode not in ("zero_flux", "absorbing_ledger"):
            raise ValueError(f"unknown boundary_mode {self.boundary_mode!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.picard_iters < 0:
            raise ValueError("picard_iters must be >= 0")
        if self.dt_max <= 0:
            raise ValueError("dt_max must be > 0")


def discretize_gaussian(grid: Grid, center: float = 0.0, sigma: float = 1.0):
    """Unit-mass Gaussian restricted to the grid and renormalised.

    Cell averages are exact (CDF differences over each cell), so the
    discrete initial datum is second-order consistent.
    """
    edges = grid.edges
    cdf = ndtr((edges - center) / sigma)
    f0 = np.diff(cdf) / grid.dx
    total = f0.sum() * grid.dx
    if total <= 0:
        raise ValueError("Gaussian carries no mass on the grid")
    return f0 / total


def compute_coefficients(state: KineticState, grid: Grid, pf: ProbabilityFn,
                         params: ModelParams, mass_tol: float = 1e-8,
                         p: np.ndarray = None) -> CoefficientSet:
    """Moment coefficients of the current density by midpoint quadrature.

    In absorbing mode the escaped mass still participates in alpha: mass
    gone to +inf sits at p = 1, mass gone to -inf at p(x_min).
    """
    mass = state.mass(grid)
    if abs(mass - 1.0) > mass_tol:
        raise MassViolationError(
            f"total mass {mass!r} deviates from 1 beyond mass_tol={mass_tol}"
        )
    if p is None:
        p = np.atleast_1d(pf(grid.centers, 0))
    w = state.f * grid.dx
    alpha = float(np.dot(p, w))
    alpha += state.escaped_right * 1.0
    alpha += state.escaped_left * float(pf(grid.x_min, 0))
    beta = float(np.dot(p * (1.0 - p), w))
    a = params.kappa - alpha
    b = alpha * (1.0 - alpha)
    return CoefficientSet(
        alpha=alpha, beta=beta, a=a, b=b,
        c=transport_coefficient(a, params),
        d=diffusion_coefficient(a, b, params),
    )


def _advective_fluxes(g: np.ndarray, c: float, boundary_mode: str) -> np.ndarray:
    """Upwind face fluxes of c*g on the n+1 faces."""
    n = g.size
    F = np.zeros(n + 1)
    if c > 0:
        F[1:n] = c * g[:-1]
    elif c < 0:
        F[1:n] = c * g[1:]
    if boundary_mode == "absorbing_ledger":
        if c < 0:
            F[0] = c * g[0]
        elif c > 0:
            F[n] = c * g[-1]
    return F


def _diffusive_fluxes(g: np.ndarray, d: float, dx: float) -> np.ndarray:
    """Centered-difference face fluxes -d * dg/dx; zero on boundary faces."""
    n = g.size
    F = np.zeros(n + 1)
    if d != 0.0:
        F[1:n] = -d * np.diff(g) / dx
    return F


def cfl_dt(coeffs: CoefficientSet, grid: Grid, max_p: float,
           cfg: SolverConfig) -> float:
    """Largest admissible dt for the explicit upwind transport."""
    speed = abs(coeffs.c) * max_p
    if speed == 0.0:
        return cfg.dt_max
    dt = cfg.cfl_advection * grid.dx / speed
    if dt < 1e-14:
        raise StepSizeError(
            f"advective speed {speed!r} forces dt < 1e-14; aborting"
        )
    return min(dt, cfg.dt_max)


def step(state: KineticState, coeffs: CoefficientSet, grid: Grid,
         pf: ProbabilityFn, cfg: SolverConfig, dt: float,
         p: np.ndarray = None) -> KineticState:
    """Advance one time step of the conservative update df/dt = -dF/dx.

    Face flux F = c*(pf)_upwind - d*d(pf)/dx|_face; the diffusion part is
    theta-implicit (tridiagonal solve on f).  After the solve the realised
    total face fluxes are re-applied, which makes the flux sum telescope in
    floating point: zero_flux conserves mass to rounding, absorbing mode
    moves the boundary outflow into the escaped-mass ledger.
    """
    if dt == 0.0:
        return replace(state, f=state.f.copy())
    if dt < 0:
        raise ValueError("dt must be >= 0")
    if coeffs.d < 0:
        raise ParabolicityError(f"diffusion coefficient d={coeffs.d!r} < 0")
    if p is None:
        p = np.atleast_1d(pf(grid.centers, 0))
    max_p = float(p.max())
    speed = abs(coeffs.c) * max_p
    if speed > 0 and dt > cfg.cfl_advection * grid.dx / speed * (1 + 1e-9):
        raise CFLError(
            f"dt={dt!r} violates the advective CFL bound "
            f"{cfg.cfl_advection * grid.dx / speed!r}"
        )

    f = state.f
    dx = grid.dx

    # transport substep: explicit first-order upwind on g = p f
    F_adv = _advective_fluxes(p * f, coeffs.c, cfg.boundary_mode)
    f_star = f - (dt / dx) * np.diff(F_adv)

    # diffusion substep from the advected field: theta-implicit on g = p f
    # (splitting keeps each substep conservative and positivity-preserving,
    # and is exact when c, d and p are constant)
    g_star = p * f_star
    F_diff_star = _diffusive_fluxes(g_star, coeffs.d, dx)
    if coeffs.d > 0 and cfg.theta > 0:
        rhs = f_star - (dt / dx) * (1.0 - cfg.theta) * np.diff(F_diff_star)
        mu = cfg.theta * coeffs.d * dt / dx**2
        n = f.size
        faces = np.full(n, 2.0)
        faces[0] = faces[-1] = 1.0
        ab = np.zeros((3, n))
        ab[0, 1:] = -mu * p[1:]
        ab[1, :] = 1.0 + mu * p * faces
        ab[2, :-1] = -mu * p[:-1]
        try:
            f_solved = solve_banded((1, 1), ab, rhs)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - defensive
            raise ParabolicityError(f"tridiagonal solve failed: {exc}") from exc
        F_diff = (1.0 - cfg.theta) * F_diff_star \
            + cfg.theta * _diffusive_fluxes(p * f_solved, coeffs.d, dx)
    else:
        F_diff = F_diff_star

    F_total = F_adv + F_diff
    f_new = f_star - (dt / dx) * np.diff(F_diff)

    escaped_left = state.escaped_left
    escaped_right = state.escaped_right
    if cfg.boundary_mode == "absorbing_ledger":
        escaped_left += max(0.0, -F_total[0] * dt)
        escaped_right += max(0.0, F_total[-1] * dt)

    clipped = state.clipped_mass
    neg = f_new < 0.0
    if np.any(neg):
        clip_mass = float(-f_new[neg].sum() * dx)
        clipped += clip_mass
        target = f_new.sum()
        f_new = np.where(neg, 0.0, f_new)
        pos_total = f_new.sum()
        if pos_total > 0:
            f_new *= target / pos_total

    return KineticState(
        f=f_new, t=state.t + dt,
        escaped_left=escaped_left, escaped_right=escaped_right,
        clipped_mass=clipped,
    )


def _merge_targets(T: float, record_times, snapshot_times) -> np.ndarray:
    ts = {0.0, float(T)}
    ts.update(float(t) for t in record_times if 0.0 <= t <= T)
    ts.update(float(t) for t in snapshot_times if 0.0 <= t <= T)
    return np.array(sorted(ts))


def geometric_record_times(T: float, first: float, ratio: float = 1.2,
                           uniform_count: int = 200) -> list:
    """Record schedule dense at early times (geometric) plus a uniform tail.

    The learning transient lives at t ~ tau while sorting needs t orders of
    magnitude larger, so a single uniform cadence cannot resolve both.
    """
    times = set()
    t = first
    while t < T:
        times.add(t)
        t *= ratio
    if uniform_count > 0:
        step_t = T / uniform_count
        times.update(step_t * k for k in range(1, uniform_count + 1))
    times.add(T)
    return sorted(times)


def _run(state: KineticState, T: float, grid: Grid, pf: ProbabilityFn,
         params: ModelParams, cfg: SolverConfig, record_times, snapshot_times,
         frozen: CoefficientSet = None, max_step_drift: list = None,
         sorting_windows=(1.0, 2.0)):
    """Shared driver for the nonlinear (lagged) and frozen-coefficient solves."""
    from .diagnostics import MomentSeries, moments

    p = np.atleast_1d(pf(grid.centers, 0))
    max_p = float(p.max())
    targets = _merge_targets(T, record_times, snapshot_times)
    snap_set = set(float(t) for t in snapshot_times)

    records = []
    snapshots = {}

    def _coeffs(st):
        if frozen is not None:
            return frozen
        return compute_coefficients(st, grid, pf, params,
                                    mass_tol=cfg.mass_tol, p=p)

    def _observe(st, coeffs):
        records.append(moments(st, grid, pf, params,
                               sorting_windows=sorting_windows,
                               coeffs_override=coeffs, p=p))
        for ts in snap_set:
            if math.isclose(st.t, ts, rel_tol=0.0, abs_tol=1e-9):
                flux = _advective_fluxes(p * st.f, coeffs.c, cfg.boundary_mode)
                flux += _diffusive_fluxes(p * st.f, coeffs.d, grid.dx)
                snapshots[ts] = {"f": st.f.copy(), "flux_left_face": flux[:-1].copy()}

    coeffs = _coeffs(state)
    _observe(state, coeffs)
    ti = 1  # next record/snapshot target
    while ti < targets.size:
        coeffs = _coeffs(state)
        dt = cfl_dt(coeffs, grid, max_p, cfg)
        for _ in range(cfg.picard_iters):
            trial = step(state, coeffs, grid, pf, cfg, dt, p=p)
            coeffs = _coeffs(trial)
            dt = min(dt, cfl_dt(coeffs, grid, max_p, cfg))
        hit = False
        if state.t + dt >= targets[ti] - 1e-13 * max(1.0, T):
            dt = targets[ti] - state.t
            hit = True
        mass_before = state.mass(grid)
        state = step(state, coeffs, grid, pf, cfg, dt, p=p)
        if max_step_drift is not None:
            max_step_drift[0] = max(max_step_drift[0],
                                    abs(state.mass(grid) - mass_before))
        if hit:
            state.t = float(targets[ti])  # the step landed here by construction
            _observe(state, coeffs)
            ti += 1

    series = MomentSeries(records=records, params=params)
    return snapshots, series


def solve(f0, T: float, grid: Grid, pf: ProbabilityFn, params: ModelParams,
          cfg: SolverConfig, record_times=(), snapshot_times=(),
          max_step_drift: list = None, sorting_windows=(1.0, 2.0)):
    """Solve the nonlinear kinetic equation with lagged coefficients.

    f0 must be a nonnegative cell-averaged density of unit mass (1e-10),
    and must satisfy beta(0) > 0, otherwise the diffusion starts degenerate
    and the problem is rejected.
    """
    f0 = np.asarray(f0, dtype=float)
    if f0.shape != (grid.n_cells,):
        raise ValueError(f"f0 must have {grid.n_cells} cells")
    if np.any(f0 < 0):
        raise ValueError("f0 must be nonnegative")
    if abs(f0.sum() * grid.dx - 1.0) > 1e-10:
        raise ValueError("f0 must have unit mass within 1e-10")
    pf_eff = regularize_p(pf, cfg.epsilon)
    p = np.atleast_1d(pf_eff(grid.centers, 0))
    beta0 = float(np.dot(p * (1.0 - p), f0) * grid.dx)
    if beta0 <= 0:
        raise ParabolicityError(
            "beta(0) = 0: diffusion is degenerate for this initial density"
        )
    state = KineticState(f=f0.copy(), t=0.0)
    return _run(state, T, grid, pf_eff, params, cfg,
                record_times, snapshot_times, max_step_drift=max_step_drift,
                sorting_windows=sorting_windows)


def solve_linear(f0, T: float, grid: Grid, pf: ProbabilityFn,
                 params: ModelParams, cfg: SolverConfig,
                 coeffs: CoefficientSet, record_times=(), snapshot_times=(),
                 max_step_drift: list = None, sorting_windows=(1.0, 2.0)):
    """Frozen-coefficient (linearised) solve: c and d fixed for all times.

    This is the discrete counterpart of the linearised problem used to
    construct the nonlinear solution, and the test mode for convergence
    studies against closed-form constant-coefficient solutions.
    """
    f0 = np.asarray(f0, dtype=float)
    state = KineticState(f=f0.copy(), t=0.0)
    return _run(state, T, grid, pf, params, cfg,
                record_times, snapshot_times, frozen=coeffs,
                max_step_drift=max_step_drift, sorting_windows=sorting_windows)


def advected_gaussian(x, t, center, sigma, c0, d0):
    """Closed-form solution of df/dt + c0 df/dx = d0 d2f/dx2 on the line."""
    var = sigma**2 + 2.0 * d0 * t
    return np.exp(-((x - center - c0 * t) ** 2) / (2.0 * var)) / np.sqrt(2.0 * np.pi * var)


def advected_gaussian_cell_average(grid: Grid, t, center, sigma, c0, d0):
    """Cell averages of the closed-form solution (exact, via the normal CDF)."""
    var = sigma**2 + 2.0 * d0 * t
    sd = math.sqrt(var)
    edges = grid.edges
    cdf = ndtr((edges - center - c0 * t) / sd)
    return np.diff(cdf) / grid.dx
