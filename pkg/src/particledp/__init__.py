"""Meshless Monte-Carlo dynamic programming for stochastic optimal control.

The state space is sampled by a particle cloud instead of a grid; the value
function lives on the particles and is read anywhere through self-normalized
importance-sampling likelihoods of the process-noise density.  Finite-horizon
and discounted infinite-horizon solvers are provided, with optional one-step
chance constraints, plus independent oracles (Riccati, quadrature, naive DP)
and a CLI for reproducible end-to-end runs.
"""

__version__ = "0.1.0"

from .model import (
    Bilinear2DDynamics,
    BoxControls,
    ConfigurationError,
    FiniteControls,
    GaussianDensity,
    HookCost,
    HookDynamics,
    HookTerminal,
    InvariantViolationError,
    LinearDynamics,
    MixtureDensity,
    QuadraticCost,
    QuadraticTerminal,
    StateSpace,
    TruncatedGaussianDensity,
    UniformBoxDensity,
    ZeroTerminal,
    eval_dynamics,
    eval_noise_density,
    eval_stage_cost,
    eval_terminal_cost,
)
from .sampling import (
    ControlGrid,
    LikelihoodRow,
    NoSupportOverlapError,
    ParticleCloud,
    SamplingError,
    draw_particles,
    estimate_expectation,
    likelihood_row,
    sample_control_grid,
)
from .bellman import (
    BellmanUpdateReport,
    FiniteHorizon,
    InfeasibleStateError,
    InfiniteDiscounted,
    PolicySolution,
    ProblemSpec,
    SolverOptions,
    Trajectory,
    WeightVector,
    apply_bellman_operator,
    bellman_backup_at,
    eval_many,
    eval_policy,
    eval_value,
    load_solution,
    save_solution,
    simulate_rollout,
    solve_finite_horizon,
    terminal_weights,
    value_iteration,
)
from .constraints import (
    AllInfeasibleError,
    ConstraintSpec,
    SafeSet,
    admissible_controls,
    initialize_infeasible_set,
    safety_probability,
)
from .oracle import (
    LqrSolution,
    QuadraticFit,
    QuadratureResult,
    brute_force_expectation,
    exact_small_dp,
    fit_quadratic,
    solve_discounted_riccati,
)
