"""Discrete-time stochastic learning dynamics for M agents.

Each round every agent independently enters with probability p(x_i); the
m entrants add h*(Mc - m) to their propensity, everyone else is unchanged.
Propensities are unbounded reals.  Replica ensembles give Monte Carlo
estimates of the learning and sorting observables.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import ModelParams, ProbabilityFn


@dataclass
class AgentEnsembleState:
    """Propensities of the M agents plus the round counter and RNG stream."""

    x: np.ndarray
    n: int
    rng: np.random.Generator

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if not np.all(np.isfinite(self.x)):
            raise ValueError("propensities must be finite")


@dataclass
class AbmRecord:
    n: int
    t: float
    m: float
    alpha_hat: float
    a_hat: float
    sorting: dict


@dataclass
class AbmSeries:
    """Per-round records of one trajectory or the mean/SE aggregate of many."""

    records: list
    replica_count: int
    m_se: np.ndarray = None
    alpha_se: np.ndarray = None

    @property
    def n_values(self):
        return np.array([r.n for r in self.records])

    @property
    def t_values(self):
        return np.array([r.t for r in self.records])

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def sorting_column(self, R):
        return np.array([r.sorting[R] for r in self.records])


def apply_round(x: np.ndarray, delta: np.ndarray, params: ModelParams):
    """Deterministic propensity update given the entry indicators delta."""
    m = int(delta.sum())
    x_new = x + params.h * (params.Mc - m) * delta
    return x_new, m


def step_round(state: AgentEnsembleState, params: ModelParams,
               pf: ProbabilityFn):
    """Play one round: draw entries, update entrant propensities.

    Consumes exactly M uniform draws from the state's RNG, one per agent in
    agent order, so rigged-draw tests can reproduce any outcome.
    """
    p = np.atleast_1d(pf(state.x, 0))
    u = state.rng.random(len(state.x))
    delta = (u < p).astype(float)
    x_new, m = apply_round(state.x, delta, params)
    return AgentEnsembleState(x=x_new, n=state.n + 1, rng=state.rng), m


def sorting_fraction(xs, R: float) -> float:
    """Fraction of agents with propensity strictly inside (-R, R)."""
    if R <= 0:
        raise ValueError(f"window half-width R must be > 0, got {R}")
    xs = np.asarray(xs, dtype=float)
    return float(np.mean(np.abs(xs) < R))


def thinned_rounds(rounds: int, ratio: float = 1.15, dense_until: int = 10):
    """Geometrically thinned record rounds covering 0..rounds.

    Long runs need ~1/h^2 rounds for sorting; uniform logging would be
    wasteful, so records are dense early and geometric afterwards.
    """
    marks = set(range(0, min(dense_until, rounds) + 1))
    n = float(max(dense_until, 1))
    while n < rounds:
        n *= ratio
        marks.add(int(round(n)))
    marks.add(rounds)
    return sorted(m for m in marks if m <= rounds)


def run_trajectory(x0, rounds: int, params: ModelParams, pf: ProbabilityFn,
                   seed, R_windows=(1.0, 2.0), record_rounds=None) -> AbmSeries:
    """Single replica of `rounds` rounds; fully determined by (seed, x0).

    `seed` may be an int or a numpy SeedSequence.  Records carry t = tau*n.
    The record at n=0 is the initial state (its m is 0 by convention, no
    round has been played).
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    rng = np.random.default_rng(seed)
    state = AgentEnsembleState(x=np.array(x0, dtype=float), n=0, rng=rng)
    if record_rounds is None:
        record_rounds = thinned_rounds(rounds)
    record_set = sorted(set(int(n) for n in record_rounds if 0 <= n <= rounds))

    records = []

    def _snap(m):
        p = np.atleast_1d(pf(state.x, 0))
        alpha_hat = float(p.mean())
        records.append(AbmRecord(
            n=state.n, t=params.tau * state.n, m=float(m),
            alpha_hat=alpha_hat, a_hat=params.kappa - alpha_hat,
            sorting={R: sorting_fraction(state.x, R) for R in R_windows},
        ))

    targets = iter(record_set)
    next_rec = next(targets, None)
    if next_rec == 0:
        _snap(0)
        next_rec = next(targets, None)
    m = 0
    for n in range(1, rounds + 1):
        state, m = step_round(state, params, pf)
        if not np.all(np.isfinite(state.x)):
            raise FloatingPointError(f"non-finite propensity at round {n}")
        if next_rec == n:
            _snap(m)
            next_rec = next(targets, None)
    series = AbmSeries(records=records, replica_count=1)
    series.m_se = np.zeros(len(records))
    series.alpha_se = np.zeros(len(records))
    series._final_x = state.x
    return series


def replica_seeds(base_seed, replicas: int):
    """Deterministic per-replica seeds; replica r's seed depends only on
    (base_seed, r), so execution order cannot matter."""
    return np.random.SeedSequence(base_seed).spawn(replicas)


def ensemble_run(replicas: int, base_seed, x0_sampler, rounds: int,
                 params: ModelParams, pf: ProbabilityFn,
                 R_windows=(1.0, 2.0), record_rounds=None,
                 keep_final_propensities: bool = False) -> AbmSeries:
    """Monte Carlo ensemble: mean and standard error of each observable.

    Replica r draws its initial propensities and all round randomness from
    the stream spawned as child r of base_seed; x0_sampler(rng, M) -> x0 is
    called first on that stream.
    """
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    if record_rounds is None:
        record_rounds = thinned_rounds(rounds)
    seeds = replica_seeds(base_seed, replicas)
    per_rep = []
    finals = []
    for seq in seeds:
        rng = np.random.default_rng(seq)
        x0 = x0_sampler(rng, params.M)
        rep = run_trajectory(x0, rounds, params, pf, rng,
                             R_windows=R_windows, record_rounds=record_rounds)
        per_rep.append(rep)
        if keep_final_propensities:
            finals.append(rep._final_x)

    n_rec = len(per_rep[0].records)
    m_mat = np.array([[r.records[k].m for k in range(n_rec)] for r in per_rep])
    a_mat = np.array([[r.records[k].alpha_hat for k in range(n_rec)] for r in per_rep])
    sort_mats = {
        R: np.array([[r.records[k].sorting[R] for k in range(n_rec)] for r in per_rep])
        for R in R_windows
    }

    def _se(mat):
        if replicas == 1:
            return np.zeros(mat.shape[1])
        return mat.std(axis=0, ddof=1) / np.sqrt(replicas)

    records = []
    for k in range(n_rec):
        base = per_rep[0].records[k]
        alpha_mean = float(a_mat[:, k].mean())
        records.append(AbmRecord(
            n=base.n, t=base.t, m=float(m_mat[:, k].mean()),
            alpha_hat=alpha_mean, a_hat=params.kappa - alpha_mean,
            sorting={R: float(sort_mats[R][:, k].mean()) for R in R_windows},
        ))
    series = AbmSeries(records=records, replica_count=replicas,
                       m_se=_se(m_mat), alpha_se=_se(a_mat))
    series._alpha_matrix = a_mat
    if keep_final_propensities:
        series._final_propensities = np.concatenate(finals)
    return series


def empirical_density(xs, grid):
    """Cell-averaged histogram density on the grid.

    Normalised so that sum(f)*dx equals the in-range sample fraction; the
    out-of-range fractions are returned separately as (left, right).
    """
    xs = np.asarray(xs, dtype=float)
    edges = grid.edges
    n = xs.size
    if n == 0:
        raise ValueError("empty sample")
    counts, _ = np.histogram(xs, bins=edges)
    out_left = float(np.sum(xs < edges[0]) / n)
    out_right = float(np.sum(xs >= edges[-1]) / n)
    # np.histogram puts x == right edge in the last bin; count it as escaped
    on_edge = np.sum(xs == edges[-1])
    if on_edge:
        counts[-1] -= on_edge
    f_hat = counts / (n * grid.dx)
    return f_hat, out_left, out_right


def gaussian_sampler(center: float, sigma: float):
    """i.i.d. Gaussian initial propensities (used when not matching a PDE grid)."""
    def _sample(rng, M):
        return center + sigma * rng.standard_normal(M)
    return _sample


def density_sampler(f0: np.ndarray, grid):
    """Inverse-CDF sampler of a cell-averaged density on the grid.

    This is how the ABM shares its initial data with the PDE: both see the
    same discretised density, so comparisons start from matched states.
    """
    f0 = np.asarray(f0, dtype=float)
    pmass = f0 * grid.dx
    total = pmass.sum()
    if total <= 0:
        raise ValueError("initial density has no mass on the grid")
    cdf = np.concatenate([[0.0], np.cumsum(pmass / total)])
    cdf[-1] = 1.0
    edges = grid.edges

    def _sample(rng, M):
        u = rng.random(M)
        idx = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, len(f0) - 1)
        seg = cdf[idx + 1] - cdf[idx]
        frac = np.where(seg > 0, (u - cdf[idx]) / np.maximum(seg, 1e-300), 0.5)
        return edges[idx] + frac * grid.dx
    return _sample
