"""Market entry game: parameters, payoff rule, and entry-probability maps.

The game has M agents and a critical capacity Mc.  Every round each agent
enters independently with probability p(x_i), where x_i is the agent's
propensity; entrants receive h*(Mc - m) for m total entrants and add that
payoff to their propensity.  Everything downstream (the agent simulation,
the closure oracle, and the kinetic solver) shares the objects defined here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class ExtrapolationError(ValueError):
    """Raised when a tabulated probability map is queried outside its table."""


def _as_float_array(x):
    return np.asarray(x, dtype=float)


@dataclass(frozen=True)
class ModelParams:
    """Game and learning parameters.

    M      -- number of agents (>= 2)
    Mc     -- market capacity, real in the open interval (1, M)
    h      -- payoff per unit deviation of the entrant count from Mc (> 0)
    tau    -- wall-clock time per round (> 0); round n happens at t = tau*n
    """

    M: int
    Mc: float
    h: float
    tau: float

    def __post_init__(self):
        if self.M < 2:
            raise ValueError(f"M must be >= 2, got {self.M}")
        if not (1.0 < self.Mc < self.M):
            raise ValueError(f"Mc must lie in (1, M)=(1, {self.M}), got {self.Mc}")
        if self.h <= 0:
            raise ValueError(f"h must be > 0, got {self.h}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")

    @property
    def kappa(self) -> float:
        """(Mc - 1)/(M - 1); entry moment at which the mean drift vanishes."""
        return (self.Mc - 1.0) / (self.M - 1.0)

    @property
    def transport_rate(self) -> float:
        """h (M-1)/tau, the rate constant of the aggregate-learning drift."""
        return self.h * (self.M - 1) / self.tau

    @property
    def diffusion_rate(self) -> float:
        """h^2 (M-1)/(2 tau), the rate constant of the sorting diffusion."""
        return self.h**2 * (self.M - 1) / (2.0 * self.tau)


def kappa(params: ModelParams) -> float:
    """Balance value of the mean entry probability, (Mc-1)/(M-1) in (0, 1)."""
    return params.kappa


def payoff(entered: bool, m: int, params: ModelParams) -> float:
    """Round payoff to a single agent given the total entrant count m.

    Non-entrants earn nothing; entrants earn h*(Mc - m), which changes sign
    at the capacity.
    """
    if m < 0 or m > params.M:
        raise ValueError(f"entrant count m={m} outside [0, M={params.M}]")
    if entered and m == 0:
        raise ValueError("an agent that entered implies m >= 1")
    if not entered:
        return 0.0
    return params.h * (params.Mc - m)


def transport_coefficient(a: float, params: ModelParams) -> float:
    """c = h (M-1) a / tau, the transport coefficient of the kinetic equation."""
    return params.h * (params.M - 1) * a / params.tau


def diffusion_coefficient(a: float, b: float, params: ModelParams) -> float:
    """d = (h^2 (M-1)^2 / 2 tau) (a^2 + b/(M-1)), the kinetic diffusion coefficient."""
    m1 = params.M - 1
    return (params.h**2 * m1**2 / (2.0 * params.tau)) * (a * a + b / m1)


# ---------------------------------------------------------------------------
# Probability families
# ---------------------------------------------------------------------------

class ProbabilityFn:
    """Monotone C^2 map from propensity to entry probability.

    Subclasses provide ``_eval(x, order)`` for order in {0, 1, 2} and carry
    two certificates:

    p_min -- infimum of p over the real line
    c_p   -- constant for the derivative conditions
             p' <= c_p (1 - p),  |p''| <= c_p (1 - p),  |p''| <= c_p p'
    """

    p_min: float
    c_p: float

    def __call__(self, x, order: int = 0):
        if order not in (0, 1, 2):
            raise ValueError(f"order must be 0, 1 or 2, got {order}")
        return self._eval(_as_float_array(x), order)

    def _eval(self, x: np.ndarray, order: int):  # pragma: no cover - abstract
        raise NotImplementedError


def prob_eval(pf: ProbabilityFn, x, order: int = 0):
    """Evaluate p, p' or p'' of a probability map at x."""
    return pf(x, order)


@dataclass(frozen=True)
class LogisticFloor(ProbabilityFn):
    """p(x) = p_min + (1 - p_min) * sigmoid(s (x - x_c)).

    Strictly increasing with a positive floor p_min; satisfies all three
    derivative conditions with c_p = max(s, s^2):
        p' = s * sigma * (1 - p) <= s (1 - p)
        |p''| = s |1 - 2 sigma| p' <= s p'  and  <= s^2 (1 - p).
    """

    p_min: float = 0.0
    s: float = 1.0
    x_c: float = 0.0
    c_p: float = field(init=False)

    def __post_init__(self):
        if not (0.0 <= self.p_min < 1.0):
            raise ValueError(f"p_min must be in [0, 1), got {self.p_min}")
        if self.s <= 0:
            raise ValueError(f"scale s must be > 0, got {self.s}")
        object.__setattr__(self, "c_p", max(self.s, self.s**2))

    def _eval(self, x, order):
        z = self.s * (x - self.x_c)
        sig = expit(z)
        if order == 0:
            return self.p_min + (1.0 - self.p_min) * sig
        d1 = (1.0 - self.p_min) * self.s * sig * (1.0 - sig)
        if order == 1:
            return d1
        return self.s * (1.0 - 2.0 * sig) * d1


@dataclass(frozen=True)
class ConstantP(ProbabilityFn):
    """Constant entry probability; test mode for the frozen-coefficient solver."""

    value: float = 1.0
    c_p: float = field(init=False, default=0.0)
    p_min: float = field(init=False)

    def __post_init__(self):
        if not (0.0 < self.value <= 1.0):
            raise ValueError(f"constant p must be in (0, 1], got {self.value}")
        object.__setattr__(self, "p_min", self.value)
        object.__setattr__(self, "c_p", 0.0)

    def _eval(self, x, order):
        if order == 0:
            return np.full_like(x, self.value)
        return np.zeros_like(x)


@dataclass(frozen=True)
class RationalTails(ProbabilityFn):
    """Rational-tail probability map with p_min = 0.

    Equals x^alpha/(1 + x^alpha) for x >= x_switch and 1/(1 + |x|^alpha)
    for x <= -x_switch; on the middle interval the two branches are joined
    by the quintic Hermite interpolant matching value, slope and curvature
    at both switch points.  The certificate c_p is computed numerically at
    construction (dense grid plus the analytic tail suprema).
    """

    alpha: float = 2.0
    x_switch: float = 2.0
    c_p: float = field(init=False)
    p_min: float = field(init=False, default=0.0)
    _quintic: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.x_switch <= 0:
            raise ValueError(f"x_switch must be > 0, got {self.x_switch}")
        object.__setattr__(self, "p_min", 0.0)
        object.__setattr__(self, "_quintic", self._fit_quintic())
        object.__setattr__(self, "c_p", self._certify())

    def _fit_quintic(self):
        xs = self.x_switch
        v0, d0, c0 = self._branch_vals(-xs)
        v1, d1, c1 = self._branch_vals(xs)
        # quintic coefficients from the two-point Hermite system
        A = np.zeros((6, 6))
        b = np.array([v0, d0, c0, v1, d1, c1])
        for row, (x, order) in enumerate(
            [(-xs, 0), (-xs, 1), (-xs, 2), (xs, 0), (xs, 1), (xs, 2)]
        ):
            for k in range(6):
                if order == 0:
                    A[row, k] = x**k
                elif order == 1:
                    A[row, k] = k * x ** (k - 1) if k >= 1 else 0.0
                else:
                    A[row, k] = k * (k - 1) * x ** (k - 2) if k >= 2 else 0.0
        return np.linalg.solve(A, b)

    def _branch_vals(self, x):
        """Value and first two derivatives of the tail branch active at x (scalar)."""
        v, d1, d2 = self._tail(np.asarray([x], dtype=float))
        return float(v[0]), float(d1[0]), float(d2[0])

    def _tail(self, x):
        """Vectorized tail branches: right for x > 0, left mirror for x < 0."""
        a = self.alpha
        z = np.abs(x)
        za = z**a
        den = 1.0 + za
        v = np.where(x > 0, za / den, 1.0 / den)
        d1 = a * z ** (a - 1.0) / den**2
        d2 = a * z ** (a - 2.0) * ((a - 1.0) - (a + 1.0) * za) / den**3
        d2 = np.where(x > 0, d2, -d2)
        return v, d1, d2

    def _eval(self, x, order):
        x = np.atleast_1d(x)
        out = np.empty_like(x)
        tails = np.abs(x) >= self.x_switch
        mid = ~tails
        if np.any(tails):
            out[tails] = self._tail(x[tails])[order]
        if np.any(mid):
            coef = self._quintic
            xm = x[mid]
            if order == 0:
                out[mid] = sum(coef[k] * xm**k for k in range(6))
            elif order == 1:
                out[mid] = sum(k * coef[k] * xm ** (k - 1) for k in range(1, 6))
            else:
                out[mid] = sum(k * (k - 1) * coef[k] * xm ** (k - 2) for k in range(2, 6))
        return out if out.shape else float(out)

    def _certify(self):
        xs = np.linspace(-max(50.0, 10 * self.x_switch), max(50.0, 10 * self.x_switch), 20001)
        p = self._eval(xs, 0)
        d1 = self._eval(xs, 1)
        d2 = self._eval(xs, 2)
        one_m_p = np.maximum(1.0 - p, 1e-300)
        c1 = np.max(d1 / one_m_p)
        c2 = np.max(np.abs(d2) / one_m_p)
        pos = d1 > 1e-300
        c3 = np.max(np.abs(d2[pos]) / d1[pos])
        return float(max(c1, c2, c3)) * 1.05


@dataclass(frozen=True)
class TabulatedC2(ProbabilityFn):
    """Probability map backed by a 3-column table (x, p, p').

    p'' is obtained by centered differences of the tabulated p'.  Order-0
    and order-1 queries use piecewise cubic Hermite interpolation; order-2
    is linear between nodes.  Queries outside the table raise
    ExtrapolationError.
    """

    xs: np.ndarray
    ps: np.ndarray
    dps: np.ndarray
    p_min: float = field(init=False)
    c_p: float = field(init=False)
    d2ps: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        xs = _as_float_array(self.xs)
        ps = _as_float_array(self.ps)
        dps = _as_float_array(self.dps)
        if xs.ndim != 1 or len(xs) < 3:
            raise ValueError("table needs at least 3 rows")
        if not (len(xs) == len(ps) == len(dps)):
            raise ValueError("table columns must have equal length")
        if np.any(np.diff(xs) <= 0):
            raise ValueError("table x column must be strictly increasing")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ps", ps)
        object.__setattr__(self, "dps", dps)
        d2 = np.gradient(dps, xs)
        object.__setattr__(self, "d2ps", d2)
        object.__setattr__(self, "p_min", float(ps[0]))
        one_m_p = np.maximum(1.0 - ps, 1e-300)
        pos = dps > 1e-300
        cands = [np.max(dps / one_m_p), np.max(np.abs(d2) / one_m_p)]
        if np.any(pos):
            cands.append(np.max(np.abs(d2[pos]) / dps[pos]))
        object.__setattr__(self, "c_p", float(max(cands)))

    @classmethod
    def from_file(cls, path) -> "TabulatedC2":
        data = np.loadtxt(path)
        if data.ndim != 2 or data.shape[1] != 3:
            raise ValueError(f"{path}: expected a 3-column table (x, p, p')")
        return cls(xs=data[:, 0], ps=data[:, 1], dps=data[:, 2])

    def _eval(self, x, order):
        x = np.atleast_1d(x)
        if np.any(x < self.xs[0]) or np.any(x > self.xs[-1]):
            raise ExtrapolationError(
                f"query outside table range [{self.xs[0]}, {self.xs[-1]}]"
            )
        if order == 0:
            return self._hermite(x, self.ps, self.dps)
        if order == 1:
            return self._hermite(x, self.dps, self.d2ps)
        return np.interp(x, self.xs, self.d2ps)

    def _hermite(self, x, vals, derivs):
        idx = np.clip(np.searchsorted(self.xs, x, side="right") - 1, 0, len(self.xs) - 2)
        x0, x1 = self.xs[idx], self.xs[idx + 1]
        hseg = x1 - x0
        t = (x - x0) / hseg
        h00 = (1 + 2 * t) * (1 - t) ** 2
        h10 = t * (1 - t) ** 2
        h01 = t * t * (3 - 2 * t)
        h11 = t * t * (t - 1)
        return (
            h00 * vals[idx]
            + h10 * hseg * derivs[idx]
            + h01 * vals[idx + 1]
            + h11 * hseg * derivs[idx + 1]
        )


def regularize_p(pf: ProbabilityFn, epsilon: float) -> ProbabilityFn:
    """Lift the floor of p: p_eps = (p + eps)/(1 + eps).

    epsilon = 0 returns pf unchanged.  The same c_p certificate remains
    valid because both p_eps' and 1 - p_eps scale by 1/(1 + eps).
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if epsilon == 0:
        return pf
    return _RegularizedP(base=pf, epsilon=epsilon)


@dataclass(frozen=True)
class _RegularizedP(ProbabilityFn):
    base: ProbabilityFn
    epsilon: float
    p_min: float = field(init=False)
    c_p: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "p_min", (self.base.p_min + self.epsilon) / (1.0 + self.epsilon))
        object.__setattr__(self, "c_p", self.base.c_p)

    def _eval(self, x, order):
        if order == 0:
            return (self.base(x, 0) + self.epsilon) / (1.0 + self.epsilon)
        return self.base(x, order) / (1.0 + self.epsilon)


# ---------------------------------------------------------------------------
# Condition certification and equilibrium summary
# ---------------------------------------------------------------------------

@dataclass
class ConditionReport:
    """Grid certificate for the derivative conditions on p."""

    grid: np.ndarray
    c_p_tested: float
    monotonicity_violations: list
    slope_bound_violations: list      # p' <= c_p (1 - p)
    curvature_bound_violations: list  # |p''| <= c_p (1 - p)
    curvature_slope_violations: list  # |p''| <= c_p p'
    minimal_c_p: float
    has_flat_regions: bool

    @property
    def ok(self) -> bool:
        return not (
            self.monotonicity_violations
            or self.slope_bound_violations
            or self.curvature_bound_violations
            or self.curvature_slope_violations
        )


def verify_p_conditions(pf: ProbabilityFn, test_grid, c_p_candidate: float,
                        rtol: float = 1e-9) -> ConditionReport:
    """Check the slope/curvature conditions on p at every grid point.

    Lists every violating point and reports the smallest c_p that would
    pass on this grid (inf when p'' != 0 where p' == 0).  Flat regions
    (p' = 0 on a non-degenerate set) are legal but flagged.
    """
    grid = _as_float_array(test_grid)
    if grid.size == 0:
        raise ValueError("test_grid must be nonempty")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("test_grid must be sorted increasing")
    p = np.atleast_1d(pf(grid, 0))
    d1 = np.atleast_1d(pf(grid, 1))
    d2 = np.atleast_1d(pf(grid, 2))
    one_m_p = 1.0 - p
    tol = rtol * max(1.0, c_p_candidate)

    mono = [float(x) for x, v in zip(grid, d1) if v < -tol]
    slope = [
        float(x) for x, v, w in zip(grid, d1, one_m_p)
        if v > c_p_candidate * w + tol
    ]
    curv = [
        float(x) for x, v, w in zip(grid, d2, one_m_p)
        if abs(v) > c_p_candidate * w + tol
    ]
    curv_slope = [
        float(x) for x, v, w in zip(grid, d2, d1)
        if abs(v) > c_p_candidate * max(w, 0.0) + tol
    ]

    safe_one_m_p = np.maximum(one_m_p, 1e-300)
    ratios = [np.max(d1 / safe_one_m_p), np.max(np.abs(d2) / safe_one_m_p)]
    flat = d1 <= tol
    if np.any(~flat):
        ratios.append(np.max(np.abs(d2[~flat]) / d1[~flat]))
    if np.any(flat & (np.abs(d2) > tol)):
        minimal = math.inf
    else:
        minimal = float(max(0.0, max(ratios)))
        if np.allclose(d1, 0.0, atol=tol) and np.allclose(d2, 0.0, atol=tol):
            minimal = 0.0

    return ConditionReport(
        grid=grid,
        c_p_tested=c_p_candidate,
        monotonicity_violations=mono,
        slope_bound_violations=slope,
        curvature_bound_violations=curv,
        curvature_slope_violations=curv_slope,
        minimal_c_p=minimal,
        has_flat_regions=bool(np.any(flat)),
    )


@dataclass(frozen=True)
class EquilibriumSummary:
    symmetric_entry_probability: float
    expected_entrants: float
    nash_band: tuple

    @property
    def expected_in_band_interior(self) -> bool:
        lo, hi = self.nash_band
        return lo < self.expected_entrants < hi


def equilibrium_summary(params: ModelParams) -> EquilibriumSummary:
    """Symmetric mixed equilibrium and the Nash entrant band [Mc-1, Mc].

    The symmetric equilibrium enters with probability (Mc-1)/(M-1); its
    expected entrant count M (Mc-1)/(M-1) lies strictly inside (Mc-1, Mc).
    """
    pbar = params.kappa
    expected = params.M * pbar
    summary = EquilibriumSummary(
        symmetric_entry_probability=pbar,
        expected_entrants=expected,
        nash_band=(params.Mc - 1.0, params.Mc),
    )
    assert summary.expected_in_band_interior
    return summary
