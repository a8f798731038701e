"""Particle dynamic-programming solvers.

Two recursions over the particle weights: a backward finite-horizon solve and
a discounted value iteration run to a relative-change criterion.  Both share
one sweep engine that evaluates, for every particle and every control, the
stage cost plus the importance-weighted continuation value, and minimizes
over the admissible controls.

Determinism contract: particles are processed in fixed-size blocks and every
reduction runs in a fixed per-row order, so solver output is bit-identical
regardless of the thread count and of whether likelihood rows are cached or
recomputed.
"""

from __future__ import annotations

import io
import json
import logging
import os
import time
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import model as _m
from .constraints import (
    AllInfeasibleError,
    ConstraintSpec,
    SafeSet,
    apply_constraint_adaptation,
    forward_invariance_mask,
    initialize_infeasible_set,
)
from .model import ConfigurationError
from .sampling import (
    ControlGrid,
    ParticleCloud,
    log_likelihood_matrix,
    normalize_log_rows,
)

__all__ = [
    "BLOCK",
    "WeightVector",
    "BellmanUpdateReport",
    "FiniteHorizon",
    "InfiniteDiscounted",
    "ProblemSpec",
    "SolverOptions",
    "PolicySolution",
    "Trajectory",
    "InfeasibleStateError",
    "terminal_weights",
    "bellman_backup_at",
    "apply_bellman_operator",
    "solve_finite_horizon",
    "value_iteration",
    "eval_value",
    "eval_policy",
    "eval_many",
    "simulate_rollout",
    "save_solution",
    "load_solution",
    "weights_to_csv",
    "reports_to_csv",
]

log = logging.getLogger("particledp")

# Particles per engine block.  A constant, never derived from the thread
# count: block boundaries define the (fixed) shapes all reductions see.
BLOCK = 16


class InfeasibleStateError(RuntimeError):
    """A state has no admissible control (or none with support overlap)."""

    def __init__(self, state, reason: str = "no admissible control"):
        self.state = np.asarray(state, dtype=float)
        super().__init__(f"{reason} at state {self.state.tolist()}")


@dataclass(frozen=True)
class WeightVector:
    """Per-particle value weights at one stage (finite) or iteration (discounted)."""

    values: np.ndarray
    stage_or_iteration: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class BellmanUpdateReport:
    iteration: int
    max_abs_relative_change: float
    sup_abs_change: float
    wall_time: float  # seconds


@dataclass(frozen=True)
class FiniteHorizon:
    """Backward recursion over T stages; stage costs may carry a discount
    schedule stage_discount**k (and stage_discount**T on the terminal cost)."""

    T: int
    stage_discount: float = 1.0

    def __post_init__(self):
        if self.T < 1:
            raise ConfigurationError("horizon must be >= 1")
        if not (0.0 < self.stage_discount <= 1.0):
            raise ConfigurationError("stage discount must be in (0, 1]")


@dataclass(frozen=True)
class InfiniteDiscounted:
    alpha: float
    tol: float = 1e-3
    max_iters: int = 1000
    floor: float = 1e-8  # guards the relative-change denominator at zero weights

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ConfigurationError("discount factor must be in (0, 1)")
        if self.tol <= 0.0:
            raise ConfigurationError("convergence tolerance must be positive")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1")


Mode = Union[FiniteHorizon, InfiniteDiscounted]


@dataclass(frozen=True)
class ProblemSpec:
    """Complete problem description consumed by the solvers."""

    dynamics: _m.DynamicsModel
    cost: _m.StageCost
    terminal: _m.TerminalCost
    noise: _m.NoiseDensity
    sampling: _m.SamplingDensity
    state_space: _m.StateSpace
    control_space: _m.ControlSpace
    mode: Mode

    def validate(self) -> None:
        r_x = self.state_space.r_x
        if self.dynamics.r_x != r_x:
            raise ConfigurationError("dynamics state dimension does not match state space")
        if self.noise.dim != r_x:
            raise ConfigurationError("noise dimension does not match state space")
        if self.sampling.dim != r_x:
            raise ConfigurationError("sampling density dimension does not match state space")
        r_u = self.control_space.r_u
        if self.dynamics.r_u != r_u:
            raise ConfigurationError("dynamics control dimension does not match control space")
        if isinstance(self.cost, _m.QuadraticCost):
            if self.cost.r_x != r_x or self.cost.r_u != r_u:
                raise ConfigurationError("quadratic cost dimensions do not match problem")
        if isinstance(self.terminal, _m.QuadraticTerminal):
            if self.terminal.Q_T.shape[0] != r_x:
                raise ConfigurationError("terminal cost dimension does not match state space")
        support = getattr(self.sampling, "support_box", None)
        if support is not None:
            covers = np.all(support[:, 0] <= self.state_space.box[:, 0]) and np.all(
                support[:, 1] >= self.state_space.box[:, 1]
            )
            if not covers:
                raise ConfigurationError("sampling density support does not cover the state box")


@dataclass(frozen=True)
class SolverOptions:
    """Execution knobs that must never change results, only speed/memory."""

    threads: int = 1
    cache_mode: str = "auto"  # auto | always | never
    cache_budget_bytes: int = 3 << 30
    on_no_overlap: str = "error"  # error | nearest

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")
        if self.cache_mode not in ("auto", "always", "never"):
            raise ConfigurationError("cache_mode must be auto, always, or never")
        if self.on_no_overlap not in ("error", "nearest"):
            raise ConfigurationError("on_no_overlap must be 'error' or 'nearest'")


@dataclass
class PolicySolution:
    """Everything needed to evaluate the value function and policy anywhere."""

    problem: ProblemSpec
    cloud: ParticleCloud
    grid: ControlGrid
    weights: list  # finite horizon: [stage 0 .. stage T]; discounted: [final]
    argmin_indices: np.ndarray  # per particle, -1 where infeasible/frozen
    converged: bool
    options: SolverOptions
    constraints: Optional[ConstraintSpec] = None
    n_iterations: int = 0

    @property
    def final_weights(self) -> WeightVector:
        return self.weights[0]

    @property
    def is_finite_horizon(self) -> bool:
        return isinstance(self.problem.mode, FiniteHorizon)


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray  # (n_steps_taken + 1, r_x)
    controls: np.ndarray  # (n_steps_taken, r_u)
    costs: np.ndarray  # (n_steps_taken,)
    truncated_reason: Optional[str] = None  # "exited_state_space" | "infeasible_state"

    @property
    def n_steps(self) -> int:
        return self.controls.shape[0]


# ---------------------------------------------------------------------------
# Sweep engine


def _available_memory_bytes() -> Optional[int]:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return None


def _prepare_rows(cloud: ParticleCloud, noise, means: np.ndarray, on_no_overlap: str):
    """Normalized likelihood rows for a batch of predicted means.

    Shared by the sweep engine and every evaluation path; all operations are
    per-row, so batching never changes values.  In "nearest" mode rows with
    no support overlap become one-hot at the nearest particle.
    """
    log_m = log_likelihood_matrix(cloud, noise, means)
    rows, _, no_overlap = normalize_log_rows(log_m)
    n_fallback = 0
    if on_no_overlap == "nearest" and np.any(no_overlap):
        for r in np.nonzero(no_overlap)[0]:
            dists = np.linalg.norm(cloud.points - means[r], axis=1)
            rows[r, :] = 0.0
            rows[r, int(np.argmin(dists))] = 1.0
        n_fallback = int(no_overlap.sum())
        no_overlap = np.zeros_like(no_overlap)
    return rows, no_overlap, n_fallback


def _minimize_rows(
    rows: np.ndarray,
    no_overlap: np.ndarray,
    screen_flat: np.ndarray,
    cost_block: np.ndarray,
    weights: np.ndarray,
    discount: float,
    cost_scale: float,
    constraint: Optional[ConstraintSpec],
):
    """Min over controls of cost + discount * continuation on prepared rows.

    rows/screen_flat have one entry per (state, control) pair in row-major
    order; cost_block is (n_states, n_controls).  Returns per-state values,
    argmin control indices, and the empty-admissible-set mask.
    """
    s, q = cost_block.shape
    w_eff = weights
    infeas_f = feas_f = None
    if constraint is not None and constraint.infeasible:
        infeas_f = constraint.infeasible_mask(weights.shape[0]).astype(float)
        feas_f = 1.0 - infeas_f
        if constraint.infeasible_mode == "renormalize":
            w_eff = weights * feas_f
    cont = np.einsum("rj,j->r", rows, w_eff, optimize=False)
    admissible = screen_flat & ~no_overlap
    if constraint is not None and constraint.infeasible:
        if constraint.infeasible_mode == "renormalize":
            denom = np.einsum("rj,j->r", rows, feas_f, optimize=False)
            ok = denom > 0.0
            cont = np.where(ok, cont / np.where(ok, denom, 1.0), 0.0)
            admissible &= ok
        unsafe = np.einsum("rj,j->r", rows, infeas_f, optimize=False)
        safety = np.minimum(np.maximum(1.0 - unsafe, 0.0), 1.0)
        admissible &= safety >= 1.0 - constraint.epsilon
    qval = cost_block * cost_scale + discount * cont.reshape(s, q)
    qval = np.where(admissible.reshape(s, q), qval, np.inf)
    empty = ~np.any(np.isfinite(qval), axis=1)
    return qval.min(axis=1), qval.argmin(axis=1), empty


class _SweepEngine:
    """Vectorized Bellman backups over the cloud, block by block.

    Likelihood rows depend only on (cloud, grid, dynamics, noise), so they can
    be cached across sweeps when memory permits; cached and recomputed rows
    are produced by the identical code path.
    """

    def __init__(
        self,
        problem: ProblemSpec,
        cloud: ParticleCloud,
        grid: ControlGrid,
        options: SolverOptions,
    ):
        problem.validate()
        if cloud.r_x != problem.state_space.r_x:
            raise ConfigurationError("cloud dimension does not match problem")
        if grid.n < 1:
            raise ConfigurationError("control grid is empty")
        if grid.r_u != problem.dynamics.r_u:
            raise ConfigurationError("grid control dimension does not match problem")
        self.problem = problem
        self.cloud = cloud
        self.grid = grid
        self.options = options
        self.n = cloud.n
        self.q = grid.n
        self.pred = problem.dynamics.predicted_means(cloud.points, grid.controls)
        self.cost = problem.cost.stage_matrix(cloud.points, grid.controls)
        if problem.noise.support_box is not None:
            flat = forward_invariance_mask(
                self.pred.reshape(-1, cloud.r_x), problem.noise, problem.state_space
            )
            self.screen = flat.reshape(self.n, self.q)
        else:
            self.screen = np.ones((self.n, self.q), dtype=bool)
            from .constraints import _warn_unbounded_screen_once

            _warn_unbounded_screen_once()
        self.n_blocks = (self.n + BLOCK - 1) // BLOCK
        self._cache = [None] * self.n_blocks if self._should_cache() else None
        self._fallback_count = 0

    def _should_cache(self) -> bool:
        if self.options.cache_mode == "always":
            return True
        if self.options.cache_mode == "never":
            return False
        size = self.n * self.q * self.n * 8
        budget = self.options.cache_budget_bytes
        avail = _available_memory_bytes()
        if avail is not None:
            budget = min(budget, avail // 2)
        return size <= budget

    def _block_rows(self, b: int):
        """Normalized likelihood rows for block b: (rows, no_overlap), rows (R, N)."""
        if self._cache is not None and self._cache[b] is not None:
            return self._cache[b]
        lo = b * BLOCK
        hi = min(lo + BLOCK, self.n)
        means = self.pred[lo:hi].reshape(-1, self.cloud.r_x)
        rows, no_overlap, n_fallback = _prepare_rows(
            self.cloud, self.problem.noise, means, self.options.on_no_overlap
        )
        self._fallback_count += n_fallback
        result = (rows, no_overlap)
        if self._cache is not None:
            self._cache[b] = result
        return result

    def sweep(
        self,
        weights: np.ndarray,
        discount: float,
        cost_scale: float = 1.0,
        constraint: Optional[ConstraintSpec] = None,
        skip_mask: Optional[np.ndarray] = None,
    ):
        """One Bellman update over all particles.

        Returns (new_values, argmin_indices, empty_mask).  Particles under
        `skip_mask` keep their current weight and get argmin -1; `empty_mask`
        flags non-skipped particles whose admissible control set came up
        empty (callers decide whether that is an error or a constraint event).
        """
        n = self.n
        new_values = np.empty(n)
        argmins = np.full(n, -1, dtype=np.int64)
        empty = np.zeros(n, dtype=bool)

        def run_block(b: int) -> None:
            lo = b * BLOCK
            hi = min(lo + BLOCK, n)
            rows, no_overlap = self._block_rows(b)
            vals, args, block_empty = _minimize_rows(
                rows,
                no_overlap,
                self.screen[lo:hi].reshape(-1),
                self.cost[lo:hi],
                weights,
                discount,
                cost_scale,
                constraint,
            )
            new_values[lo:hi] = np.where(block_empty, weights[lo:hi], vals)
            argmins[lo:hi] = np.where(block_empty, -1, args)
            empty[lo:hi] = block_empty
            if skip_mask is not None:
                sl = skip_mask[lo:hi]
                new_values[lo:hi][sl] = weights[lo:hi][sl]
                argmins[lo:hi][sl] = -1
                empty[lo:hi][sl] = False

        if self.options.threads > 1:
            with ThreadPoolExecutor(max_workers=self.options.threads) as pool:
                list(pool.map(run_block, range(self.n_blocks)))
        else:
            for b in range(self.n_blocks):
                run_block(b)
        return new_values, argmins, empty


# ---------------------------------------------------------------------------
# Single-state backup (shared by eval_value / eval_policy and tests)


def bellman_backup_at(
    x,
    admissible: ControlGrid,
    next_weights,
    cloud: ParticleCloud,
    problem: ProblemSpec,
    discount: float,
    *,
    cost_scale: float = 1.0,
    exclude_from_interpolation: Optional[np.ndarray] = None,
    on_no_overlap: str = "error",
):
    """min over admissible controls of l(x, u) + discount * sum_j w_j c_j(x, u).

    Ties break toward the lowest control index.  Controls without support
    overlap are dropped ("error" mode) or re-routed to the nearest particle
    ("nearest" mode); if every control drops out the state is infeasible.
    When `exclude_from_interpolation` is given, likelihood rows are
    renormalized over the remaining particles before weighting.
    """
    if admissible.n < 1:
        raise InfeasibleStateError(x, "empty admissible control set")
    xv = np.asarray(x, dtype=float).reshape(-1)
    w = np.asarray(getattr(next_weights, "values", next_weights), dtype=float).reshape(-1)
    if w.shape[0] != cloud.n:
        raise ConfigurationError("weight vector length must match the particle count")

    means = problem.dynamics.predicted_means(xv[None, :], admissible.controls)[0]
    rows, no_overlap, _ = _prepare_rows(cloud, problem.noise, means, on_no_overlap)

    usable = ~no_overlap
    w_eff = w
    if exclude_from_interpolation is not None and np.any(exclude_from_interpolation):
        feas_f = (~exclude_from_interpolation).astype(float)
        w_eff = w * feas_f
        denom = np.einsum("rj,j->r", rows, feas_f, optimize=False)
        cont = np.einsum("rj,j->r", rows, w_eff, optimize=False)
        ok = denom > 0.0
        cont = np.where(ok, cont / np.where(ok, denom, 1.0), 0.0)
        usable &= ok
    else:
        cont = np.einsum("rj,j->r", rows, w_eff, optimize=False)

    if not np.any(usable):
        raise InfeasibleStateError(xv, "no control has support overlap")
    cost_row = problem.cost.stage_matrix(xv[None, :], admissible.controls)[0]
    qval = np.where(usable, cost_row * cost_scale + discount * cont, np.inf)
    idx = int(np.argmin(qval))
    return float(qval[idx]), admissible.controls[idx].copy()


def apply_bellman_operator(
    problem: ProblemSpec,
    cloud: ParticleCloud,
    grid: ControlGrid,
    weights,
    *,
    discount: Optional[float] = None,
    cost_scale: float = 1.0,
    constraint: Optional[ConstraintSpec] = None,
    options: Optional[SolverOptions] = None,
) -> np.ndarray:
    """One application of the particle Bellman operator to a weight vector.

    Exposed for contraction/monotonicity checks: the operator is a min over
    convex combinations, so it contracts the sup norm by the discount factor.
    """
    opts = options or SolverOptions()
    if discount is None:
        if not isinstance(problem.mode, InfiniteDiscounted):
            raise ConfigurationError("discount required for finite-horizon operator use")
        discount = problem.mode.alpha
    w = np.asarray(getattr(weights, "values", weights), dtype=float).reshape(-1)
    engine = _SweepEngine(problem, cloud, grid, opts)
    values, _, empty = engine.sweep(
        w, discount, cost_scale=cost_scale, constraint=constraint
    )
    if np.any(empty):
        raise InfeasibleStateError(
            cloud.points[int(np.nonzero(empty)[0][0])], "no admissible control"
        )
    return values


# ---------------------------------------------------------------------------
# Constraint bookkeeping shared by both solvers


def _setup_constraints(
    constraint: Optional[ConstraintSpec], cloud: ParticleCloud, init_weights: np.ndarray
):
    """Initialize the infeasible set and resolve the frozen infeasible value."""
    if constraint is None:
        return None, None
    constraint.infeasible = initialize_infeasible_set(cloud, constraint.safe_set)
    if len(constraint.infeasible) >= cloud.n:
        raise AllInfeasibleError("every particle lies in the unsafe region")
    mask = constraint.infeasible_mask(cloud.n)
    if constraint.infeasible_value is not None:
        pen = float(constraint.infeasible_value)
    else:
        pen = 10.0 * float(np.max(init_weights[~mask]))
    return mask, pen


def _absorb_new_infeasible(
    constraint: ConstraintSpec,
    empty: np.ndarray,
    skip_mask: np.ndarray,
    values: np.ndarray,
    pen: float,
    n: int,
) -> np.ndarray:
    """Apply the between-sweep adaptation; returns the updated skip mask."""
    newly = set(int(i) for i in np.nonzero(empty & ~skip_mask)[0])
    if newly:
        apply_constraint_adaptation(constraint, newly, n)
    mask = constraint.infeasible_mask(n)
    values[mask] = pen
    return mask


# ---------------------------------------------------------------------------
# Solvers


def terminal_weights(
    cloud: ParticleCloud, terminal: _m.TerminalCost, *, stage: int = 0
) -> WeightVector:
    """Terminal-cost evaluations at the particles."""
    return WeightVector(values=terminal.terminal_many(cloud.points), stage_or_iteration=stage)


def default_initial_weights(
    problem: ProblemSpec, cloud: ParticleCloud, grid: ControlGrid
) -> WeightVector:
    """Stage cost at each particle, taken at the first grid control.

    The one-argument initialization l(xi) leaves the control slot open; the
    first control in the grid serves as the reference argument.
    """
    ref = grid.controls[0:1]
    vals = problem.cost.stage_matrix(cloud.points, ref)[:, 0]
    return WeightVector(values=vals, stage_or_iteration=0)


def solve_finite_horizon(
    problem: ProblemSpec,
    cloud: ParticleCloud,
    grid: ControlGrid,
    constraint: Optional[ConstraintSpec] = None,
    options: Optional[SolverOptions] = None,
) -> PolicySolution:
    """Backward recursion of the finite-horizon particle DP.

    Produces T+1 weight vectors (stage 0 holds the time-zero values).  With
    constraints active, particles whose permissible set empties join the
    infeasible set between sweeps and keep a frozen penalty weight.
    """
    if not isinstance(problem.mode, FiniteHorizon):
        raise ConfigurationError("solve_finite_horizon needs FiniteHorizon mode")
    opts = options or SolverOptions()
    engine = _SweepEngine(problem, cloud, grid, opts)
    T = problem.mode.T
    sd = problem.mode.stage_discount

    term = terminal_weights(cloud, problem.terminal, stage=T).values * (sd**T)
    skip_mask, pen = _setup_constraints(constraint, cloud, term)
    if skip_mask is not None:
        term = term.copy()
        term[skip_mask] = pen

    stage_vectors = [WeightVector(values=term, stage_or_iteration=T)]
    weights = term
    argmins = np.full(cloud.n, -1, dtype=np.int64)
    for k in range(T - 1, -1, -1):
        values, argmins, empty = engine.sweep(
            weights,
            discount=1.0,
            cost_scale=sd**k,
            constraint=constraint,
            skip_mask=skip_mask,
        )
        if constraint is not None:
            skip_mask = _absorb_new_infeasible(
                constraint, empty, skip_mask, values, pen, cloud.n
            )
        elif np.any(empty):
            raise InfeasibleStateError(
                cloud.points[int(np.nonzero(empty)[0][0])], "no admissible control"
            )
        weights = values
        stage_vectors.append(WeightVector(values=values, stage_or_iteration=k))

    stage_vectors.reverse()  # index k -> stage k
    return PolicySolution(
        problem=problem,
        cloud=cloud,
        grid=grid,
        weights=stage_vectors,
        argmin_indices=argmins,
        converged=True,
        options=opts,
        constraints=constraint,
        n_iterations=T,
    )


def value_iteration(
    problem: ProblemSpec,
    cloud: ParticleCloud,
    grid: ControlGrid,
    init: Optional[Union[WeightVector, np.ndarray]] = None,
    constraint: Optional[ConstraintSpec] = None,
    options: Optional[SolverOptions] = None,
):
    """Discounted value iteration on the particle weights.

    Iterates until max_l |w+_l - w_l| / max(|w_l|, floor) <= tol or the
    iteration cap is hit; the change is measured over feasible particles.
    Returns (solution, reports); a capped run comes back with converged=False
    rather than an exception.
    """
    if not isinstance(problem.mode, InfiniteDiscounted):
        raise ConfigurationError("value_iteration needs InfiniteDiscounted mode")
    mode = problem.mode
    opts = options or SolverOptions()
    engine = _SweepEngine(problem, cloud, grid, opts)

    if init is None:
        weights = default_initial_weights(problem, cloud, grid).values.copy()
    else:
        weights = np.asarray(getattr(init, "values", init), dtype=float).reshape(-1).copy()
        if weights.shape[0] != cloud.n:
            raise ConfigurationError("initial weight vector length must match the cloud")

    skip_mask, pen = _setup_constraints(constraint, cloud, weights)
    if skip_mask is not None:
        weights[skip_mask] = pen

    reports: list[BellmanUpdateReport] = []
    argmins = np.full(cloud.n, -1, dtype=np.int64)
    converged = False
    iteration = 0
    for iteration in range(1, mode.max_iters + 1):
        t0 = time.perf_counter()
        values, argmins, empty = engine.sweep(
            weights,
            discount=mode.alpha,
            constraint=constraint,
            skip_mask=skip_mask,
        )
        if constraint is not None:
            skip_mask = _absorb_new_infeasible(
                constraint, empty, skip_mask, values, pen, cloud.n
            )
        elif np.any(empty):
            raise InfeasibleStateError(
                cloud.points[int(np.nonzero(empty)[0][0])], "no admissible control"
            )
        live = ~skip_mask if skip_mask is not None else np.ones(cloud.n, dtype=bool)
        diff = np.abs(values[live] - weights[live])
        sup_change = float(diff.max()) if diff.size else 0.0
        denom = np.maximum(np.abs(weights[live]), mode.floor)
        rel_change = float((diff / denom).max()) if diff.size else 0.0
        reports.append(
            BellmanUpdateReport(
                iteration=iteration,
                max_abs_relative_change=rel_change,
                sup_abs_change=sup_change,
                wall_time=time.perf_counter() - t0,
            )
        )
        weights = values
        if rel_change <= mode.tol:
            converged = True
            break

    if not converged:
        log.warning(
            "value iteration hit the %d-iteration cap (last relative change %.3g)",
            mode.max_iters,
            reports[-1].max_abs_relative_change if reports else float("nan"),
        )
    solution = PolicySolution(
        problem=problem,
        cloud=cloud,
        grid=grid,
        weights=[WeightVector(values=weights, stage_or_iteration=iteration)],
        argmin_indices=argmins,
        converged=converged,
        options=opts,
        constraints=constraint,
        n_iterations=iteration,
    )
    return solution, reports


# ---------------------------------------------------------------------------
# Evaluation at arbitrary states


def _admissible_at(sol: PolicySolution, x) -> ControlGrid:
    from .constraints import admissible_controls

    return admissible_controls(
        x,
        sol.grid,
        sol.cloud,
        sol.constraints,
        sol.problem.dynamics,
        sol.problem.noise,
        sol.problem.state_space,
        on_no_overlap=sol.options.on_no_overlap,
    )


def _eval_backup(sol: PolicySolution, x, stage: int):
    xv = np.asarray(x, dtype=float).reshape(-1)
    if not sol.problem.state_space.contains(xv):
        raise ConfigurationError(f"query state {xv.tolist()} lies outside the state box")
    admissible = _admissible_at(sol, xv)
    if admissible.n == 0:
        raise InfeasibleStateError(xv, "empty admissible control set")
    exclude = None
    if (
        sol.constraints is not None
        and sol.constraints.infeasible
        and sol.constraints.infeasible_mode == "renormalize"
    ):
        exclude = sol.constraints.infeasible_mask(sol.cloud.n)
    if isinstance(sol.problem.mode, FiniteHorizon):
        T = sol.problem.mode.T
        if not (0 <= stage < T):
            raise ConfigurationError(f"stage must lie in [0, {T})")
        next_w = sol.weights[stage + 1]
        discount = 1.0
        cost_scale = sol.problem.mode.stage_discount**stage
    else:
        next_w = sol.weights[0]
        discount = sol.problem.mode.alpha
        cost_scale = 1.0
    return bellman_backup_at(
        xv,
        admissible,
        next_w,
        sol.cloud,
        sol.problem,
        discount,
        cost_scale=cost_scale,
        exclude_from_interpolation=exclude,
        on_no_overlap=sol.options.on_no_overlap,
    )


def eval_value(sol: PolicySolution, x, *, stage: int = 0) -> float:
    """Value estimate at any state in the box; no grid lookup involved."""
    value, _ = _eval_backup(sol, x, stage)
    return value


def eval_policy(sol: PolicySolution, x, *, stage: int = 0) -> np.ndarray:
    """Argmin control at any state; ties break toward the lowest control index."""
    _, control = _eval_backup(sol, x, stage)
    return control


EVAL_BLOCK = 8  # query states per evaluation block


def eval_many(sol: PolicySolution, states, *, stage: int = 0):
    """Batched value/policy evaluation at many query states.

    Returns (values, controls, feasible): infeasible states get NaN entries
    and feasible=False instead of an exception.  Values agree bit-for-bit
    with eval_value/eval_policy (the per-row arithmetic is batch-invariant);
    only the per-state Python overhead is amortized, which matters for
    colormap-style grids.  All states must lie inside the state box.
    """
    X = np.atleast_2d(np.asarray(states, dtype=float))
    if X.shape[1] != sol.cloud.r_x:
        raise ConfigurationError("query state dimension does not match the problem")
    inside = sol.problem.state_space.contains(X)
    if not np.all(inside):
        bad = X[int(np.nonzero(~inside)[0][0])]
        raise ConfigurationError(f"query state {bad.tolist()} lies outside the state box")
    if isinstance(sol.problem.mode, FiniteHorizon):
        T = sol.problem.mode.T
        if not (0 <= stage < T):
            raise ConfigurationError(f"stage must lie in [0, {T})")
        weights = sol.weights[stage + 1].values
        discount = 1.0
        cost_scale = sol.problem.mode.stage_discount**stage
    else:
        weights = sol.weights[0].values
        discount = sol.problem.mode.alpha
        cost_scale = 1.0

    problem, cloud, grid = sol.problem, sol.cloud, sol.grid
    bounded = problem.noise.support_box is not None
    s_total = X.shape[0]
    values = np.full(s_total, np.nan)
    controls = np.full((s_total, grid.r_u), np.nan)
    feasible = np.zeros(s_total, dtype=bool)
    for lo in range(0, s_total, EVAL_BLOCK):
        hi = min(lo + EVAL_BLOCK, s_total)
        block = X[lo:hi]
        means = problem.dynamics.predicted_means(block, grid.controls)
        flat_means = means.reshape(-1, cloud.r_x)
        if bounded:
            screen = forward_invariance_mask(flat_means, problem.noise, problem.state_space)
        else:
            screen = np.ones(flat_means.shape[0], dtype=bool)
        rows, no_overlap, _ = _prepare_rows(
            cloud, problem.noise, flat_means, sol.options.on_no_overlap
        )
        cost_block = problem.cost.stage_matrix(block, grid.controls)
        vals, args, empty = _minimize_rows(
            rows, no_overlap, screen, cost_block, weights, discount, cost_scale,
            sol.constraints,
        )
        ok = ~empty
        values[lo:hi][ok] = vals[ok]
        controls[lo:hi][ok] = grid.controls[args[ok]]
        feasible[lo:hi] = ok
    return values, controls, feasible


def simulate_rollout(
    sol: PolicySolution,
    x0,
    steps: int,
    seed: int,
    *,
    zero_noise: bool = False,
) -> Trajectory:
    """Closed-loop rollout under the computed policy with seeded noise draws.

    Stops early (with a reason) if the state leaves the box or hits an
    infeasible region.  Finite-horizon solutions use their stage-k policies
    and cannot run past the horizon.
    """
    xv = np.asarray(x0, dtype=float).reshape(-1)
    if not sol.problem.state_space.contains(xv):
        raise ConfigurationError("rollout start state lies outside the state box")
    if steps < 0:
        raise ConfigurationError("steps must be >= 0")
    if sol.is_finite_horizon:
        steps = min(steps, sol.problem.mode.T)
    rng = np.random.default_rng(seed)

    states = [xv.copy()]
    controls, costs = [], []
    reason = None
    x = xv
    for k in range(steps):
        try:
            u = eval_policy(sol, x, stage=k if sol.is_finite_horizon else 0)
        except InfeasibleStateError:
            reason = "infeasible_state"
            break
        cost = float(sol.problem.cost.stage_matrix(x[None, :], u[None, :])[0, 0])
        nxt = sol.problem.dynamics.step_many(x[None, :], u[None, :])[0]
        if not zero_noise:
            nxt = nxt + sol.problem.noise.sample(rng, 1)[0]
        controls.append(u)
        costs.append(cost)
        states.append(nxt.copy())
        x = nxt
        if not sol.problem.state_space.contains(x):
            reason = "exited_state_space"
            break
    r_u = sol.grid.r_u
    return Trajectory(
        states=np.asarray(states),
        controls=np.asarray(controls).reshape(len(controls), r_u),
        costs=np.asarray(costs, dtype=float),
        truncated_reason=reason,
    )


# ---------------------------------------------------------------------------
# Serialization: model codecs, CSV exports, solution archives


def dynamics_to_dict(dyn) -> dict:
    if isinstance(dyn, _m.LinearDynamics):
        return {"kind": "linear", "F": dyn.F.tolist(), "B": dyn.B.tolist()}
    if isinstance(dyn, _m.Bilinear2DDynamics):
        return {"kind": "bilinear2d"}
    raise ConfigurationError("hook dynamics cannot be serialized")


def dynamics_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "linear":
        return _m.LinearDynamics(F=np.array(d["F"], dtype=float), B=np.array(d["B"], dtype=float))
    if kind == "bilinear2d":
        return _m.Bilinear2DDynamics()
    raise ConfigurationError(f"unknown dynamics kind: {kind!r}")


def cost_to_dict(cost) -> dict:
    if isinstance(cost, _m.QuadraticCost):
        return {"kind": "quadratic", "Q": cost.Q.tolist(), "R": cost.R.tolist()}
    raise ConfigurationError("hook costs cannot be serialized")


def cost_from_dict(d: dict):
    if d.get("kind") == "quadratic":
        return _m.QuadraticCost(Q=np.array(d["Q"], dtype=float), R=np.array(d["R"], dtype=float))
    raise ConfigurationError(f"unknown cost kind: {d.get('kind')!r}")


def terminal_to_dict(term) -> dict:
    if isinstance(term, _m.ZeroTerminal):
        return {"kind": "zero"}
    if isinstance(term, _m.QuadraticTerminal):
        return {"kind": "quadratic", "Q": term.Q_T.tolist()}
    raise ConfigurationError("hook terminal costs cannot be serialized")


def terminal_from_dict(d: dict):
    kind = d.get("kind", "zero")
    if kind == "zero":
        return _m.ZeroTerminal()
    if kind == "quadratic":
        return _m.QuadraticTerminal(Q_T=np.array(d["Q"], dtype=float))
    raise ConfigurationError(f"unknown terminal cost kind: {kind!r}")


def density_to_dict(dens) -> dict:
    if isinstance(dens, _m.GaussianDensity):
        return {"kind": "gaussian", "mean": dens.mean.tolist(), "cov": dens.cov.tolist()}
    if isinstance(dens, _m.TruncatedGaussianDensity):
        return {
            "kind": "truncated_gaussian",
            "mean": dens.mean.tolist(),
            "cov": dens.cov.tolist(),
            "box": dens.box.tolist(),
        }
    if isinstance(dens, _m.UniformBoxDensity):
        return {"kind": "uniform", "box": dens.box.tolist()}
    if isinstance(dens, _m.MixtureDensity):
        return {
            "kind": "mixture",
            "weights": dens.weights.tolist(),
            "components": [density_to_dict(c) for c in dens.components],
        }
    raise ConfigurationError(f"cannot serialize density {type(dens).__name__}")


def density_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "gaussian":
        return _m.GaussianDensity(mean=d["mean"], cov=d["cov"])
    if kind == "truncated_gaussian":
        return _m.TruncatedGaussianDensity(mean=d["mean"], cov=d["cov"], box=d["box"])
    if kind == "uniform":
        return _m.UniformBoxDensity(box=d["box"])
    if kind == "mixture":
        comps = [density_from_dict(c) for c in d["components"]]
        return _m.MixtureDensity(components=comps, weights=d["weights"])
    raise ConfigurationError(f"unknown density kind: {kind!r}")


def control_space_to_dict(space) -> dict:
    if isinstance(space, _m.FiniteControls):
        return {"kind": "finite", "controls": space.controls.tolist()}
    if isinstance(space, _m.BoxControls):
        return {
            "kind": "box",
            "box": space.box.tolist(),
            "n_controls": space.n_samples,
            "density": None if space.density is None else density_to_dict(space.density),
        }
    raise ConfigurationError(f"cannot serialize control space {type(space).__name__}")


def control_space_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "finite":
        return _m.FiniteControls(controls=np.array(d["controls"], dtype=float))
    if kind == "box":
        dens = d.get("density")
        return _m.BoxControls(
            box=d["box"],
            n_samples=int(d["n_controls"]),
            density=None if dens is None else density_from_dict(dens),
        )
    raise ConfigurationError(f"unknown control space kind: {kind!r}")


def mode_to_dict(mode: Mode) -> dict:
    if isinstance(mode, FiniteHorizon):
        return {"kind": "finite", "horizon": mode.T, "stage_discount": mode.stage_discount}
    return {
        "kind": "discounted",
        "alpha": mode.alpha,
        "tol": mode.tol,
        "max_iters": mode.max_iters,
        "floor": mode.floor,
    }


def mode_from_dict(d: dict) -> Mode:
    if d.get("kind") == "finite":
        return FiniteHorizon(T=int(d["horizon"]), stage_discount=float(d.get("stage_discount", 1.0)))
    if d.get("kind") == "discounted":
        return InfiniteDiscounted(
            alpha=float(d["alpha"]),
            tol=float(d.get("tol", 1e-3)),
            max_iters=int(d.get("max_iters", 1000)),
            floor=float(d.get("floor", 1e-8)),
        )
    raise ConfigurationError(f"unknown mode kind: {d.get('kind')!r}")


def problem_to_dict(problem: ProblemSpec) -> dict:
    return {
        "dynamics": dynamics_to_dict(problem.dynamics),
        "cost": cost_to_dict(problem.cost),
        "terminal": terminal_to_dict(problem.terminal),
        "noise": density_to_dict(problem.noise),
        "sampling": density_to_dict(problem.sampling),
        "state_box": problem.state_space.box.tolist(),
        "control_space": control_space_to_dict(problem.control_space),
        "mode": mode_to_dict(problem.mode),
    }


def problem_from_dict(d: dict) -> ProblemSpec:
    spec = ProblemSpec(
        dynamics=dynamics_from_dict(d["dynamics"]),
        cost=cost_from_dict(d["cost"]),
        terminal=terminal_from_dict(d["terminal"]),
        noise=density_from_dict(d["noise"]),
        sampling=density_from_dict(d["sampling"]),
        state_space=_m.StateSpace(box=np.array(d["state_box"], dtype=float)),
        control_space=control_space_from_dict(d["control_space"]),
        mode=mode_from_dict(d["mode"]),
    )
    spec.validate()
    return spec


def weights_to_csv(sol: PolicySolution, path, *, version: str = "", seeds_comment: str = "") -> None:
    """All stage/iteration weight vectors, one particle per row."""
    labels = [f"stage_{w.stage_or_iteration}" if sol.is_finite_horizon else "final" for w in sol.weights]
    with open(path, "w", newline="") as fh:
        fh.write(f"# particledp {version}{(' ' + seeds_comment) if seeds_comment else ''}\n")
        import csv as _csv

        writer = _csv.writer(fh)
        writer.writerow(["particle_index"] + labels)
        cols = [w.values for w in sol.weights]
        for j in range(sol.cloud.n):
            writer.writerow([j] + [repr(float(c[j])) for c in cols])


def reports_to_csv(reports, path, *, version: str = "", seeds_comment: str = "") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# particledp {version}{(' ' + seeds_comment) if seeds_comment else ''}\n")
        import csv as _csv

        writer = _csv.writer(fh)
        writer.writerow(["iteration", "max_abs_relative_change", "sup_abs_change", "wall_time_ms"])
        for r in reports:
            writer.writerow(
                [
                    r.iteration,
                    repr(float(r.max_abs_relative_change)),
                    repr(float(r.sup_abs_change)),
                    repr(float(r.wall_time * 1e3)),
                ]
            )


_ARCHIVE_FORMAT = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)  # fixed zip timestamp so archives are reproducible


def save_solution(sol: PolicySolution, path, *, version: str = "") -> None:
    """Write a self-contained archive (JSON metadata + CSV payloads)."""
    meta = {
        "format": _ARCHIVE_FORMAT,
        "version": version,
        "problem": problem_to_dict(sol.problem),
        "options": {
            "threads": sol.options.threads,
            "cache_mode": sol.options.cache_mode,
            "cache_budget_bytes": sol.options.cache_budget_bytes,
            "on_no_overlap": sol.options.on_no_overlap,
        },
        "converged": sol.converged,
        "n_iterations": sol.n_iterations,
        "cloud": {"seed": sol.cloud.seed, "n_rejected": sol.cloud.n_rejected},
        "grid": {"provenance": sol.grid.provenance, "seed": sol.grid.seed},
        "stage_labels": [w.stage_or_iteration for w in sol.weights],
        "argmin_indices": [int(i) for i in sol.argmin_indices],
        "constraints": None,
    }
    if sol.constraints is not None:
        meta["constraints"] = {
            "declared": sol.constraints.safe_set.declared,
            "boxes": [b.tolist() for b in sol.constraints.safe_set.boxes],
            "epsilon": sol.constraints.epsilon,
            "infeasible_mode": sol.constraints.infeasible_mode,
            "infeasible_value": sol.constraints.infeasible_value,
            "infeasible": sorted(int(i) for i in sol.constraints.infeasible),
        }

    def _w(zf: zipfile.ZipFile, name: str, payload: str) -> None:
        info = zipfile.ZipInfo(name, date_time=_EPOCH)
        info.compress_type = zipfile.ZIP_DEFLATED
        zf.writestr(info, payload)

    points = sol.cloud.points
    dens = sol.cloud.density
    cloud_buf = io.StringIO()
    cloud_buf.write(",".join([f"x_{d + 1}" for d in range(sol.cloud.r_x)] + ["density_value"]) + "\n")
    for j in range(sol.cloud.n):
        cloud_buf.write(",".join([repr(float(v)) for v in points[j]] + [repr(float(dens[j]))]) + "\n")

    ctl_buf = io.StringIO()
    ctl_buf.write(",".join(f"u_{d + 1}" for d in range(sol.grid.r_u)) + "\n")
    for q in range(sol.grid.n):
        ctl_buf.write(",".join(repr(float(v)) for v in sol.grid.controls[q]) + "\n")

    wgt_buf = io.StringIO()
    wgt_buf.write(",".join(f"w_{i}" for i in range(len(sol.weights))) + "\n")
    for j in range(sol.cloud.n):
        wgt_buf.write(",".join(repr(float(w.values[j])) for w in sol.weights) + "\n")

    with zipfile.ZipFile(path, "w") as zf:
        _w(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True))
        _w(zf, "particles.csv", cloud_buf.getvalue())
        _w(zf, "controls.csv", ctl_buf.getvalue())
        _w(zf, "weights.csv", wgt_buf.getvalue())


def load_solution(path) -> PolicySolution:
    """Reload a solution archive for eval_value/eval_policy/simulate_rollout."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json").decode())
        if meta.get("format") != _ARCHIVE_FORMAT:
            raise ConfigurationError(f"unsupported archive format: {meta.get('format')!r}")
        problem = problem_from_dict(meta["problem"])

        def _rows(name: str) -> np.ndarray:
            text = zf.read(name).decode().strip().splitlines()
            return np.array(
                [[float(v) for v in line.split(",")] for line in text[1:]], dtype=float
            )

        cloud_rows = _rows("particles.csv")
        ctl_rows = _rows("controls.csv")
        wgt_rows = _rows("weights.csv")

    cloud = ParticleCloud(
        points=cloud_rows[:, :-1],
        log_density=np.log(cloud_rows[:, -1]),
        seed=int(meta["cloud"]["seed"]),
        n_rejected=int(meta["cloud"]["n_rejected"]),
    )
    grid = ControlGrid(
        controls=ctl_rows.reshape(ctl_rows.shape[0], -1),
        provenance=meta["grid"]["provenance"],
        seed=meta["grid"]["seed"],
    )
    labels = meta["stage_labels"]
    weights = [
        WeightVector(values=wgt_rows[:, i], stage_or_iteration=int(labels[i]))
        for i in range(len(labels))
    ]
    constraint = None
    if meta.get("constraints") is not None:
        c = meta["constraints"]
        safe = SafeSet.from_boxes(
            [np.array(b, dtype=float) for b in c["boxes"]], c["declared"], problem.state_space
        )
        constraint = ConstraintSpec(
            safe_set=safe,
            epsilon=float(c["epsilon"]),
            infeasible=set(int(i) for i in c["infeasible"]),
            infeasible_mode=c["infeasible_mode"],
            infeasible_value=c["infeasible_value"],
        )
    opts = meta["options"]
    return PolicySolution(
        problem=problem,
        cloud=cloud,
        grid=grid,
        weights=weights,
        argmin_indices=np.array(meta["argmin_indices"], dtype=np.int64),
        converged=bool(meta["converged"]),
        options=SolverOptions(
            threads=int(opts["threads"]),
            cache_mode=opts["cache_mode"],
            cache_budget_bytes=int(opts["cache_budget_bytes"]),
            on_no_overlap=opts["on_no_overlap"],
        ),
        constraints=constraint,
        n_iterations=int(meta["n_iterations"]),
    )
