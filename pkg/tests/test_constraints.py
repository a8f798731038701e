"""Chance-constraint machinery: safe sets, safety estimates, admissible sets."""

import math

import numpy as np
import pytest
from scipy.stats import norm

import particledp as pdp
from particledp.constraints import (
    AllInfeasibleError,
    apply_constraint_adaptation,
    forward_invariance_mask,
)
from particledp.model import ConfigurationError


def uniform_cloud(box, n, seed):
    return pdp.draw_particles(pdp.UniformBoxDensity(box=box), pdp.StateSpace(box=box), n, seed)


def interval_scenario(n, seed):
    """1-D scenario: X = [-5, 5], safe set [0, 5], f(x, u) = x + u, W = N(0, 0.25)."""
    box = np.array([[-5.0, 5.0]])
    space = pdp.StateSpace(box=box)
    cloud = uniform_cloud(box, n, seed)
    safe = pdp.SafeSet.from_boxes([np.array([[0.0, 5.0]])], "safe", space)
    spec = pdp.ConstraintSpec(safe_set=safe, epsilon=0.2)
    spec.infeasible = pdp.initialize_infeasible_set(cloud, safe)
    dynamics = pdp.LinearDynamics(F=[[1.0]], B=[[1.0]])
    noise = pdp.GaussianDensity([0.0], [[0.25]])
    return space, cloud, safe, spec, dynamics, noise


# ---------------------------------------------------------------------------
# SafeSet


def test_safe_set_membership_exact():
    space = pdp.StateSpace(box=[[-10.0, 10.0], [-5.0, 15.0]])
    safe = pdp.SafeSet.from_boxes(
        [[[3.0, 5.0], [-4.0, 2.0]], [[-2.0, 5.0], [-7.0, -4.0]]], "unsafe", space
    )
    assert not safe.is_safe([4.0, 0.0])  # inside first unsafe box
    assert not safe.is_safe([3.0, -4.0])  # boundary of both (closed boxes)
    assert safe.is_safe([0.0, 0.0])
    assert safe.is_safe([-3.0, -4.5])  # left of the clipped second box
    # second box is clipped to the state floor at -5
    assert not safe.is_safe([0.0, -4.5])


def test_safe_set_box_outside_state_box_rejected():
    space = pdp.StateSpace(box=[[-1.0, 1.0]])
    with pytest.raises(ConfigurationError):
        pdp.SafeSet.from_boxes([[[2.0, 3.0]]], "unsafe", space)
    with pytest.raises(ConfigurationError):
        pdp.SafeSet.from_boxes([], "safe", space)


# ---------------------------------------------------------------------------
# initialize_infeasible_set


def test_full_safe_set_gives_empty_infeasible():
    box = np.array([[-1.0, 1.0]])
    cloud = uniform_cloud(box, 100, seed=1)
    safe = pdp.SafeSet.from_boxes([box], "safe", pdp.StateSpace(box=box))
    assert pdp.initialize_infeasible_set(cloud, safe) == set()


def test_empty_safe_set_marks_everything_then_solver_fails():
    box = np.array([[-1.0, 1.0]])
    space = pdp.StateSpace(box=box)
    cloud = uniform_cloud(box, 50, seed=2)
    safe = pdp.SafeSet.from_boxes([box], "unsafe", space)  # unsafe covers all of X
    infeasible = pdp.initialize_infeasible_set(cloud, safe)
    assert infeasible == set(range(50))
    problem = pdp.ProblemSpec(
        dynamics=pdp.LinearDynamics(F=[[0.9]], B=[[1.0]]),
        cost=pdp.QuadraticCost(Q=[[1.0]], R=[[1.0]]),
        terminal=pdp.ZeroTerminal(),
        noise=pdp.GaussianDensity([0.0], [[0.25]]),
        sampling=pdp.UniformBoxDensity(box=box),
        state_space=space,
        control_space=pdp.FiniteControls(controls=np.array([[0.0]])),
        mode=pdp.InfiniteDiscounted(alpha=0.9, tol=1e-3, max_iters=10),
    )
    grid = pdp.sample_control_grid(problem.control_space)
    spec = pdp.ConstraintSpec(safe_set=safe, epsilon=0.1)
    with pytest.raises(AllInfeasibleError):
        pdp.value_iteration(problem, cloud, grid, constraint=spec)


def test_lshape_infeasible_fraction_matches_clipped_area():
    # hand area: box1 [3,5]x[-4,2] -> 12; box2 [-2,5]x[-7,-4] clipped to x2 >= -5
    # -> 7x1 = 7; overlap has measure zero; total 19 over |X| = 400
    box = np.array([[-10.0, 10.0], [-5.0, 15.0]])
    space = pdp.StateSpace(box=box)
    cloud = uniform_cloud(box, 2000, seed=7)
    safe = pdp.SafeSet.from_boxes(
        [[[3.0, 5.0], [-4.0, 2.0]], [[-2.0, 5.0], [-7.0, -4.0]]], "unsafe", space
    )
    infeasible = pdp.initialize_infeasible_set(cloud, safe)
    unsafe_mask = ~safe.is_safe(cloud.points)
    assert infeasible == set(np.nonzero(unsafe_mask)[0].tolist())
    p = 19.0 / 400.0
    se = math.sqrt(p * (1 - p) / 2000.0)
    assert abs(len(infeasible) / 2000.0 - p) <= 3.0 * se


# ---------------------------------------------------------------------------
# safety_probability


def test_safety_probability_endpoints_exact():
    box = np.array([[-5.0, 5.0]])
    cloud = uniform_cloud(box, 50, seed=3)
    noise = pdp.GaussianDensity([0.0], [[0.5]])
    row = pdp.likelihood_row(cloud, noise, [0.0])
    space = pdp.StateSpace(box=box)
    safe = pdp.SafeSet.from_boxes([box], "safe", space)
    spec = pdp.ConstraintSpec(safe_set=safe, epsilon=0.1, infeasible=set())
    assert pdp.safety_probability(cloud, spec, row) == 1.0
    spec.infeasible = set(range(50))
    assert pdp.safety_probability(cloud, spec, row) == 0.0


def test_safety_probability_matches_gaussian_orthant():
    truth = (norm.cdf(5.0) - norm.cdf(0.0)) / (norm.cdf(5.0) - norm.cdf(-5.0))
    box = np.array([[-5.0, 5.0]])
    space = pdp.StateSpace(box=box)
    safe = pdp.SafeSet.from_boxes([np.array([[0.0, 5.0]])], "safe", space)
    noise = pdp.GaussianDensity([0.0], [[1.0]])
    estimates = []
    for seed in range(20):
        cloud = uniform_cloud(box, 100_000, seed=500 + seed)
        spec = pdp.ConstraintSpec(safe_set=safe, epsilon=0.1)
        spec.infeasible = pdp.initialize_infeasible_set(cloud, safe)
        row = pdp.likelihood_row(cloud, noise, [0.0])
        estimates.append(pdp.safety_probability(cloud, spec, row))
    estimates = np.asarray(estimates)
    stderr = estimates.std(ddof=1) / math.sqrt(len(estimates))
    assert abs(estimates.mean() - truth) <= 3.0 * stderr + 1e-5


# ---------------------------------------------------------------------------
# admissible_controls


def test_interval_oracle_keeps_only_safe_control():
    space, cloud, safe, spec, dynamics, noise = interval_scenario(100_000, seed=4)
    grid = pdp.ControlGrid(
        controls=np.array([[-1.0], [0.0], [1.0]]), provenance="explicit"
    )
    out = pdp.admissible_controls([0.0], grid, cloud, spec, dynamics, noise, space)
    # closed-form masses on [0,5]: u=+1 -> 0.977, u=0 -> 0.5, u=-1 -> 0.023
    assert out.n == 1
    assert out.controls[0, 0] == 1.0


def test_vacuous_epsilon_keeps_grid():
    space, cloud, safe, spec, dynamics, noise = interval_scenario(5_000, seed=5)
    spec.epsilon = 0.999
    grid = pdp.ControlGrid(
        controls=np.array([[-1.0], [0.0], [1.0]]), provenance="explicit"
    )
    out = pdp.admissible_controls([0.0], grid, cloud, spec, dynamics, noise, space)
    assert out.n == 3


def test_empty_infeasible_set_keeps_grid():
    space, cloud, safe, spec, dynamics, noise = interval_scenario(1_000, seed=6)
    spec.infeasible = set()
    grid = pdp.ControlGrid(controls=np.array([[-1.0], [0.0]]), provenance="explicit")
    out = pdp.admissible_controls([0.0], grid, cloud, spec, dynamics, noise, space)
    assert out.n == 2


def test_output_is_subset_of_input():
    space, cloud, safe, spec, dynamics, noise = interval_scenario(20_000, seed=7)
    grid = pdp.ControlGrid(
        controls=np.linspace(-2, 2, 9).reshape(-1, 1), provenance="explicit"
    )
    out = pdp.admissible_controls([0.0], grid, cloud, spec, dynamics, noise, space)
    kept = {float(u) for u in out.controls[:, 0]}
    assert kept <= {float(u) for u in grid.controls[:, 0]}


# ---------------------------------------------------------------------------
# sure forward invariance (bounded noise)


def test_forward_invariance_screen_geometry():
    space = pdp.StateSpace(box=[[-5.0, 5.0]])
    noise = pdp.TruncatedGaussianDensity(mean=[0.0], cov=[[0.25]], box=[[-1.0, 1.0]])
    means = np.array([[3.5], [4.5], [-4.2]])
    mask = forward_invariance_mask(means, noise, space)
    # mean 3.5 -> reach [2.5, 4.5] inside; 4.5 -> [3.5, 5.5] outside; -4.2 -> [-5.2, -3.2] outside
    np.testing.assert_array_equal(mask, [True, False, False])


def test_unconstrained_solve_fails_on_screened_out_particle():
    box = np.array([[-2.0, 2.0]])
    space = pdp.StateSpace(box=box)
    cloud = pdp.ParticleCloud(
        points=np.array([[0.0], [1.5]]), log_density=np.log([0.25, 0.25]), seed=0
    )
    problem = pdp.ProblemSpec(
        dynamics=pdp.LinearDynamics(F=[[1.0]], B=[[1.0]]),
        cost=pdp.QuadraticCost(Q=[[1.0]], R=[[1.0]]),
        terminal=pdp.ZeroTerminal(),
        noise=pdp.TruncatedGaussianDensity(mean=[0.0], cov=[[0.25]], box=[[-1.0, 1.0]]),
        sampling=pdp.UniformBoxDensity(box=box),
        state_space=space,
        control_space=pdp.FiniteControls(controls=np.array([[0.0]])),
        mode=pdp.FiniteHorizon(T=1),
    )
    grid = pdp.sample_control_grid(problem.control_space)
    # particle at 1.5 reaches [0.5, 2.5] which leaves the box: no admissible control
    with pytest.raises(pdp.InfeasibleStateError):
        pdp.solve_finite_horizon(problem, cloud, grid)


# ---------------------------------------------------------------------------
# adaptation bookkeeping


def test_adaptation_grows_monotonically_and_detects_all_infeasible():
    box = np.array([[-1.0, 1.0]])
    space = pdp.StateSpace(box=box)
    safe = pdp.SafeSet.from_boxes([[[0.0, 1.0]]], "safe", space)
    spec = pdp.ConstraintSpec(safe_set=safe, epsilon=0.1, infeasible={0, 1})
    out = apply_constraint_adaptation(spec, {3}, n_particles=5)
    assert out == {0, 1, 3}
    out = apply_constraint_adaptation(spec, set(), n_particles=5)
    assert out == {0, 1, 3}
    with pytest.raises(AllInfeasibleError):
        apply_constraint_adaptation(spec, {2, 4}, n_particles=5)


# ---------------------------------------------------------------------------
# constrained solves end to end


def constrained_problem_2d(tol=0.05, max_iters=200):
    box = np.array([[-10.0, 10.0], [-5.0, 15.0]])
    return pdp.ProblemSpec(
        dynamics=pdp.Bilinear2DDynamics(),
        cost=pdp.QuadraticCost(Q=np.eye(2), R=[[1.0]]),
        terminal=pdp.ZeroTerminal(),
        noise=pdp.GaussianDensity([0.0, 0.0], 0.3 * np.eye(2)),
        sampling=pdp.UniformBoxDensity(box=box),
        state_space=pdp.StateSpace(box=box),
        control_space=pdp.BoxControls(box=[[-3.0, 3.0]], n_samples=10),
        mode=pdp.InfiniteDiscounted(alpha=0.9, tol=tol, max_iters=max_iters),
    )


def lshape_spec(problem, mode="penalty"):
    safe = pdp.SafeSet.from_boxes(
        [[[3.0, 5.0], [-4.0, 2.0]], [[-2.0, 5.0], [-7.0, -4.0]]],
        "unsafe",
        problem.state_space,
    )
    return pdp.ConstraintSpec(safe_set=safe, epsilon=0.05, infeasible_mode=mode)


@pytest.mark.parametrize("mode", ["penalty", "renormalize"])
def test_constrained_solve_grows_infeasible_set(mode):
    problem = constrained_problem_2d()
    cloud = pdp.draw_particles(problem.sampling, problem.state_space, 400, seed=17)
    grid = pdp.sample_control_grid(problem.control_space, seed=18)
    spec = lshape_spec(problem, mode)
    sol, _ = pdp.value_iteration(problem, cloud, grid, constraint=spec)
    assert sol.converged
    initial = pdp.initialize_infeasible_set(cloud, spec.safe_set)
    assert initial  # the unsafe region contains particles
    assert spec.infeasible >= initial
    mask = spec.infeasible_mask(cloud.n)
    assert np.all(sol.argmin_indices[mask] == -1)
    assert np.all(sol.argmin_indices[~mask] >= 0)


def test_constrained_solve_deterministic_infeasible_set():
    problem = constrained_problem_2d()
    cloud = pdp.draw_particles(problem.sampling, problem.state_space, 300, seed=19)
    grid = pdp.sample_control_grid(problem.control_space, seed=20)
    runs = []
    for threads in (1, 4):
        spec = lshape_spec(problem)
        opts = pdp.SolverOptions(threads=threads)
        sol, _ = pdp.value_iteration(problem, cloud, grid, constraint=spec, options=opts)
        runs.append((set(spec.infeasible), sol.final_weights.values.copy()))
    assert runs[0][0] == runs[1][0]
    assert np.array_equal(runs[0][1], runs[1][1])


def test_penalty_value_override():
    problem = constrained_problem_2d()
    cloud = pdp.draw_particles(problem.sampling, problem.state_space, 200, seed=21)
    grid = pdp.sample_control_grid(problem.control_space, seed=22)
    spec = lshape_spec(problem)
    spec.infeasible_value = 123.5
    sol, _ = pdp.value_iteration(problem, cloud, grid, constraint=spec)
    mask = spec.infeasible_mask(cloud.n)
    assert np.all(sol.final_weights.values[mask] == 123.5)


def test_constrained_finite_horizon_solve():
    problem = constrained_problem_2d()
    problem = pdp.ProblemSpec(**{**problem.__dict__, "mode": pdp.FiniteHorizon(T=3)})
    cloud = pdp.draw_particles(problem.sampling, problem.state_space, 300, seed=23)
    grid = pdp.sample_control_grid(problem.control_space, seed=24)
    spec = lshape_spec(problem)
    sol = pdp.solve_finite_horizon(problem, cloud, grid, constraint=spec)
    initial = pdp.initialize_infeasible_set(cloud, spec.safe_set)
    assert spec.infeasible >= initial
    assert len(sol.weights) == 4
    mask = spec.infeasible_mask(cloud.n)
    # the frozen value is constant across stages for particles infeasible at init
    init_mask = np.zeros(cloud.n, dtype=bool)
    init_mask[list(initial)] = True
    for wv in sol.weights:
        assert len(set(wv.values[init_mask].tolist())) <= 1
    assert np.all(sol.argmin_indices[mask] == -1)


def test_rollout_truncates_at_infeasible_start():
    problem = constrained_problem_2d()
    cloud = pdp.draw_particles(problem.sampling, problem.state_space, 300, seed=25)
    grid = pdp.sample_control_grid(problem.control_space, seed=26)
    spec = lshape_spec(problem)
    sol, _ = pdp.value_iteration(problem, cloud, grid, constraint=spec)
    traj = pdp.simulate_rollout(sol, [4.0, 0.0], steps=5, seed=1)  # inside unsafe box
    assert traj.truncated_reason == "infeasible_state"
    assert traj.n_steps == 0
    assert traj.states.shape == (1, 2)
