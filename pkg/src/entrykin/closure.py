"""Exact payoff moments and machine verification of the mean-field closure.

The M-agent generator has drift coefficients A_i = E[(Mc - m) d_i | X]
and diffusion coefficients D_ik = E[(Mc - m)^2 d_i d_k | X], with d_i the
independent entry indicators.  When the agents are i.i.d. with law f, the
one-particle averages of A and D collapse to the moment formulas

    drift factor      (M-1) a,           a = kappa - sum w p(x)
    diffusion factor  (M-1)^2 a^2 + (M-1) b,   b = alpha (1 - alpha)

per unit p(x) f(x).  Everything here computes those averages by exhaustive
enumeration of the finite probability space, so the identities can be
checked to rounding error rather than asserted.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .model import ModelParams, ProbabilityFn

MAX_AGENTS_MOMENTS = 20
MAX_AGENTS_AVERAGED = 12
MAX_ATOMS_AVERAGED = 6


class EnumerationSizeError(ValueError):
    """Problem too large for exhaustive enumeration."""


@dataclass(frozen=True)
class DiscreteDistribution:
    """Finite atomic distribution of propensities: atoms (x_r, w_r), sum w = 1."""

    xs: np.ndarray
    ws: np.ndarray

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=float)
        ws = np.asarray(self.ws, dtype=float)
        if xs.ndim != 1 or xs.shape != ws.shape:
            raise ValueError("atoms and weights must be equal-length 1-d arrays")
        if np.any(ws <= 0):
            raise ValueError("weights must be positive")
        if abs(ws.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1 within 1e-12, got {ws.sum()!r}")
        if len(np.unique(xs)) != len(xs):
            raise ValueError("atom positions must be distinct")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ws", ws)


@dataclass(frozen=True)
class PayoffMoments:
    """Drift vector A and diffusion matrix D of the M-agent generator."""

    A: np.ndarray
    D: np.ndarray

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.D)[0])


def exact_payoff_moments(xbar, params: ModelParams, pf: ProbabilityFn) -> PayoffMoments:
    """A_i and D_ik at a fixed propensity profile, by summing all 2^M outcomes.

    Every entry profile delta in {0,1}^M is weighted by
    prod_i p_i^{delta_i} (1-p_i)^{1-delta_i}; no moment identities are used.
    """
    xbar = np.asarray(xbar, dtype=float)
    M = len(xbar)
    if M != params.M:
        raise ValueError(f"profile has {M} agents but params.M = {params.M}")
    if M > MAX_AGENTS_MOMENTS:
        raise EnumerationSizeError(
            f"M = {M} exceeds the 2^M enumeration limit {MAX_AGENTS_MOMENTS}"
        )
    p = np.atleast_1d(pf(xbar, 0))

    # Build outcome weights and entrant counts without materialising a 2^M x M
    # matrix: doubling recursion over agents (agent i toggles the i-th half).
    w = np.ones(1)
    m = np.zeros(1)
    for pi in p:
        w = np.concatenate([w * (1.0 - pi), w * pi])
        m = np.concatenate([m, m + 1.0])

    payoff = params.Mc - m
    idx = np.arange(w.size)
    delta = np.empty((M, w.size), dtype=bool)
    for i in range(M):
        delta[i] = (idx >> i) & 1

    wp = w * payoff
    A = delta @ wp
    wp2 = w * payoff**2
    D = (delta * wp2) @ delta.T
    return PayoffMoments(A=A, D=D)


def closure_coefficients(f: DiscreteDistribution, params: ModelParams,
                         pf: ProbabilityFn):
    """Moment coefficients of the closed one-particle equation for atomic f.

    Returns (alpha, beta, a, b, diffusion_coeff) with
    alpha = sum w p, beta = sum w p (1-p), a = kappa - alpha,
    b = alpha (1 - alpha), diffusion_coeff = (M-1)^2 a^2 + (M-1) b.
    """
    p = np.atleast_1d(pf(f.xs, 0))
    alpha = float(np.dot(f.ws, p))
    beta = float(np.dot(f.ws, p * (1.0 - p)))
    a = params.kappa - alpha
    b = alpha * (1.0 - alpha)
    m1 = params.M - 1
    return alpha, beta, a, b, m1**2 * a**2 + m1 * b


def _compositions(total: int, parts: int):
    """All tuples of `parts` nonnegative integers summing to `total`."""
    for cuts in itertools.combinations(range(total + parts - 1), parts - 1):
        out = []
        prev = -1
        for c in cuts:
            out.append(c - prev - 1)
            prev = c
        out.append(total + parts - 2 - prev)
        yield tuple(out)


def _binomial_pmf(n: int, p: float) -> np.ndarray:
    k = np.arange(n + 1)
    comb = np.array([math.comb(n, int(kk)) for kk in k], dtype=float)
    return comb * p**k * (1.0 - p) ** (n - k)


def averaged_coefficients_exact(f: DiscreteDistribution, x_query: float,
                                params: ModelParams, pf: ProbabilityFn):
    """One-particle averages of the drift and diffusion at x_query, exactly.

    Puts the observed agent at x_query and the other M-1 agents i.i.d. on
    the atoms of f, then sums E[(Mc-m) d | x] and E[(Mc-m)^2 d | x] over
    every atom-count configuration and every entrant outcome.  Returned per
    unit p(x_query), i.e. directly comparable to (M-1) a and
    (M-1)^2 a^2 + (M-1) b from ``closure_coefficients``.

    Configurations of the other agents are grouped by their atom counts
    (the moments depend on the assignment only through counts), and entrant
    outcomes by the per-atom entrant counts; both groupings are exact.
    """
    M = params.M
    K = len(f.xs)
    if M > MAX_AGENTS_AVERAGED:
        raise EnumerationSizeError(
            f"M = {M} exceeds the averaged-enumeration limit {MAX_AGENTS_AVERAGED}"
        )
    if K > MAX_ATOMS_AVERAGED:
        raise EnumerationSizeError(
            f"{K} atoms exceed the averaged-enumeration limit {MAX_ATOMS_AVERAGED}"
        )
    p_atoms = np.atleast_1d(pf(f.xs, 0))
    p_q = float(pf(x_query, 0))

    drift = 0.0
    diff = 0.0
    log_w = np.log(f.ws)
    for counts in _compositions(M - 1, K):
        log_weight = math.lgamma(M) - sum(math.lgamma(n + 1) for n in counts)
        log_weight += float(np.dot(counts, log_w))
        weight = math.exp(log_weight)
        # distribution of S = entrants among the other M-1 agents:
        # convolution of the per-atom binomial laws (exact finite sum)
        s_pmf = np.ones(1)
        for n_r, p_r in zip(counts, p_atoms):
            if n_r:
                s_pmf = np.convolve(s_pmf, _binomial_pmf(n_r, p_r))
        svals = np.arange(s_pmf.size)
        # observed agent enters with probability p_q, making m = 1 + S
        pay = params.Mc - 1.0 - svals
        drift += weight * p_q * float(np.dot(s_pmf, pay))
        diff += weight * p_q * float(np.dot(s_pmf, pay**2))
    return drift / p_q, diff / p_q
