"""Numerical laboratory for reinforcement learning in market entry games.

Three coupled views of the same dynamics:

* ``abm`` simulates the discrete-time stochastic learning process for M
  agents directly.
* ``closure`` computes the exact drift/diffusion moments of that process by
  enumeration and machine-checks the mean-field moment closure.
* ``pde`` solves the closed one-particle transport-diffusion equation with
  a conservative finite-volume scheme.

``diagnostics`` monitors every bound a solution must satisfy, and
``cli``/``runner`` orchestrate experiments from a declarative config file.
"""

from .model import (
    ConditionReport,
    ConstantP,
    EquilibriumSummary,
    ExtrapolationError,
    LogisticFloor,
    ModelParams,
    ProbabilityFn,
    RationalTails,
    TabulatedC2,
    equilibrium_summary,
    kappa,
    payoff,
    prob_eval,
    regularize_p,
    verify_p_conditions,
)
from .closure import (
    DiscreteDistribution,
    EnumerationSizeError,
    PayoffMoments,
    averaged_coefficients_exact,
    closure_coefficients,
    exact_payoff_moments,
)
from .abm import (
    AbmSeries,
    AgentEnsembleState,
    empirical_density,
    ensemble_run,
    run_trajectory,
    sorting_fraction,
    step_round,
)
from .pde import (
    CoefficientSet,
    Grid,
    KineticState,
    SolverConfig,
    compute_coefficients,
    discretize_gaussian,
    solve,
    solve_linear,
    step,
)
from .diagnostics import (
    AsymptoticsReport,
    BoundsReport,
    EnergyReport,
    MomentRecord,
    MomentSeries,
    TimescaleReport,
    assemble_c0,
    check_energy_inequality,
    check_moment_bounds,
    moments,
    sorting_and_learning_verdict,
    timescale_report,
)

__version__ = "0.1.0"
