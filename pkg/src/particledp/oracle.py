"""Independent ground-truth engines for tests and verification runs.

Nothing here shares computation paths with the solver: densities are
evaluated through scipy.stats in linear space, expectations are done by
tensor-grid quadrature, and the tiny-instance DP is a literal naive-loop
transcription of the backward recursion.  Agreement between these oracles
and the solver is the main correctness evidence for the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import multivariate_normal, norm

from .bellman import (
    FiniteHorizon,
    InfiniteDiscounted,
    ProblemSpec,
    SolverOptions,
    WeightVector,
    apply_bellman_operator,
    solve_finite_horizon,
)
from .model import (
    Bilinear2DDynamics,
    ConfigurationError,
    FiniteControls,
    GaussianDensity,
    HookCost,
    HookDynamics,
    HookTerminal,
    LinearDynamics,
    MixtureDensity,
    QuadraticCost,
    QuadraticTerminal,
    StateSpace,
    TruncatedGaussianDensity,
    UniformBoxDensity,
    ZeroTerminal,
)
from .sampling import ControlGrid, ParticleCloud, draw_particles, likelihood_row, estimate_expectation

__all__ = [
    "LqrSolution",
    "QuadraticFit",
    "QuadratureResult",
    "BatteryResult",
    "solve_discounted_riccati",
    "brute_force_expectation",
    "exact_small_dp",
    "fit_quadratic",
    "riccati_battery",
    "contraction_battery",
    "tiny_dp_battery",
    "is_consistency_battery",
]


# ---------------------------------------------------------------------------
# Discounted LQR via Riccati fixed-point iteration


@dataclass(frozen=True)
class LqrSolution:
    """Discounted LQG value function V(x) = x'Xx + q and gain u = -Kx."""

    X: np.ndarray
    q: float
    K: np.ndarray
    alpha: float
    noise_cov: np.ndarray

    def value(self, x) -> float:
        xv = np.asarray(x, dtype=float).reshape(-1)
        return float(xv @ self.X @ xv + self.q)

    def control(self, x) -> np.ndarray:
        xv = np.asarray(x, dtype=float).reshape(-1)
        return -self.K @ xv


def solve_discounted_riccati(
    F,
    B,
    Q,
    R,
    alpha: float,
    noise_cov,
    tol: float = 1e-12,
    max_iters: int = 200000,
) -> LqrSolution:
    """Fixed-point iteration for the discounted algebraic Riccati equation.

    X_{m+1} = Q + a F'X F - a^2 F'X B (R + a B'X B)^{-1} B'X F, started at Q.
    The iteration contracts for a < 1, so non-convergence signals bad inputs.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    Sw = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    if not (0.0 < alpha < 1.0):
        raise ConfigurationError("discount factor must be in (0, 1)")
    if np.any(np.linalg.eigvalsh(R) <= 0):
        raise ConfigurationError("R must be positive definite")
    if np.any(np.linalg.eigvalsh(Q) < -1e-12):
        raise ConfigurationError("Q must be positive semidefinite")

    X = Q.copy()
    for _ in range(max_iters):
        G = np.linalg.solve(R + alpha * B.T @ X @ B, B.T @ X @ F)
        X_next = Q + alpha * F.T @ X @ F - alpha**2 * F.T @ X @ B @ G
        if np.max(np.abs(X_next - X)) <= tol:
            X = X_next
            break
        X = X_next
    else:
        raise ConfigurationError("Riccati fixed-point iteration did not converge")
    K = alpha * np.linalg.solve(R + alpha * B.T @ X @ B, B.T @ X @ F)
    q = alpha * float(np.trace(X @ Sw)) / (1.0 - alpha)
    return LqrSolution(X=X, q=q, K=K, alpha=alpha, noise_cov=Sw)


# ---------------------------------------------------------------------------
# Brute-force expectation by tensor-grid quadrature


@dataclass(frozen=True)
class QuadratureResult:
    value: float
    error_estimate: float
    n_nodes: int


def _oracle_noise_pdf(noise, w: np.ndarray) -> np.ndarray:
    """Linear-space noise pdf through scipy.stats (oracle-side evaluation)."""
    w = np.atleast_2d(w)
    if isinstance(noise, GaussianDensity):
        return np.atleast_1d(multivariate_normal(mean=noise.mean, cov=noise.cov).pdf(w))
    if isinstance(noise, TruncatedGaussianDensity):
        base = np.atleast_1d(multivariate_normal(mean=noise.mean, cov=noise.cov).pdf(w))
        inside = np.all((w >= noise.box[:, 0]) & (w <= noise.box[:, 1]), axis=1)
        return np.where(inside, base / _oracle_box_mass(noise), 0.0)
    if isinstance(noise, UniformBoxDensity):
        inside = np.all((w >= noise.box[:, 0]) & (w <= noise.box[:, 1]), axis=1)
        vol = float(np.prod(noise.box[:, 1] - noise.box[:, 0]))
        return np.where(inside, 1.0 / vol, 0.0)
    raise ConfigurationError(f"oracle cannot evaluate noise {type(noise).__name__}")


def _oracle_box_mass(noise: TruncatedGaussianDensity) -> float:
    cov = noise.cov
    if np.allclose(cov, np.diag(np.diag(cov)), atol=1e-14):
        sig = np.sqrt(np.diag(cov))
        lo = (noise.box[:, 0] - noise.mean) / sig
        hi = (noise.box[:, 1] - noise.mean) / sig
        return float(np.prod(norm.cdf(hi) - norm.cdf(lo)))
    mvn = multivariate_normal(mean=noise.mean, cov=cov)
    return float(mvn.cdf(noise.box[:, 1], lower_limit=noise.box[:, 0]))


def _oracle_sampling_pdf(density, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    if isinstance(density, UniformBoxDensity):
        inside = np.all((x >= density.box[:, 0]) & (x <= density.box[:, 1]), axis=1)
        vol = float(np.prod(density.box[:, 1] - density.box[:, 0]))
        return np.where(inside, 1.0 / vol, 0.0)
    if isinstance(density, GaussianDensity):
        return np.atleast_1d(multivariate_normal(mean=density.mean, cov=density.cov).pdf(x))
    if isinstance(density, MixtureDensity):
        total = np.zeros(x.shape[0])
        for wgt, comp in zip(density.weights, density.components):
            total = total + wgt * _oracle_sampling_pdf(comp, x)
        return total
    raise ConfigurationError(f"oracle cannot evaluate sampling density {type(density).__name__}")


def brute_force_expectation(
    V: Callable,
    center,
    noise,
    *,
    rule: str = "gauss",
    n_per_dim: int = 64,
    truncation_sigmas: float = 8.0,
) -> QuadratureResult:
    """Tensor-grid quadrature of E[V(center + w)] under the noise density.

    Unbounded noise is integrated over mean +- truncation_sigmas * sigma per
    dimension.  Use the midpoint rule (with even n_per_dim) for indicator-type
    integrands whose jump sits at a cell boundary; Gauss-Legendre for smooth
    ones.  Refuses dimensions above 3.
    """
    dim = noise.dim
    if dim > 3:
        raise ConfigurationError("brute-force quadrature is limited to dimension <= 3")
    if rule not in ("gauss", "midpoint"):
        raise ConfigurationError("rule must be 'gauss' or 'midpoint'")
    center = np.asarray(center, dtype=float).reshape(-1)
    if center.shape != (dim,):
        raise ConfigurationError("center dimension does not match noise")

    box = noise.support_box
    if box is None:
        sig = np.sqrt(np.diag(noise.cov))
        lo = noise.mean - truncation_sigmas * sig
        hi = noise.mean + truncation_sigmas * sig
        box = np.stack([lo, hi], axis=1)

    def integrate(n: int) -> float:
        axes, wts = [], []
        for d in range(dim):
            lo_d, hi_d = box[d]
            if rule == "midpoint":
                h = (hi_d - lo_d) / n
                axes.append(lo_d + h * (np.arange(n) + 0.5))
                wts.append(np.full(n, h))
            else:
                nodes, weights = np.polynomial.legendre.leggauss(n)
                axes.append(0.5 * (hi_d - lo_d) * nodes + 0.5 * (hi_d + lo_d))
                wts.append(0.5 * (hi_d - lo_d) * weights)
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        wmesh = np.meshgrid(*wts, indexing="ij")
        w = np.prod(np.stack([m.ravel() for m in wmesh], axis=1), axis=1)
        pdf = _oracle_noise_pdf(noise, pts)
        states = center + pts
        try:
            vals = np.asarray(V(states), dtype=float).reshape(-1)
            if vals.shape[0] != states.shape[0]:
                raise ValueError
        except Exception:
            vals = np.array([float(V(s)) for s in states])
        return float(np.sum(vals * pdf * w))

    coarse_n = max(2, n_per_dim // 2)
    if rule == "midpoint" and coarse_n % 2 == 1:
        coarse_n += 1
    fine = integrate(n_per_dim)
    coarse = integrate(coarse_n)
    return QuadratureResult(
        value=fine, error_estimate=abs(fine - coarse), n_nodes=n_per_dim**dim
    )


# ---------------------------------------------------------------------------
# Exact tiny-instance DP by literal enumeration


def _oracle_step(dynamics, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    if isinstance(dynamics, LinearDynamics):
        return dynamics.F @ x + dynamics.B @ u
    if isinstance(dynamics, Bilinear2DDynamics):
        x1, x2 = float(x[0]), float(x[1])
        return np.array([0.9 * x1 + 0.2 * x2, -0.15 * x1 + 0.9 * x2 + 0.05 * x1 * x2 + float(u[0])])
    if isinstance(dynamics, HookDynamics):
        return np.asarray(dynamics.fn(x, u), dtype=float).reshape(-1)
    raise ConfigurationError(f"oracle cannot step dynamics {type(dynamics).__name__}")


def _oracle_stage_cost(cost, x: np.ndarray, u: np.ndarray) -> float:
    if isinstance(cost, QuadraticCost):
        return max(float(x @ cost.Q @ x + u @ cost.R @ u), 0.0)
    if isinstance(cost, HookCost):
        return float(cost.fn(x, u))
    raise ConfigurationError(f"oracle cannot evaluate cost {type(cost).__name__}")


def _oracle_terminal(term, x: np.ndarray) -> float:
    if isinstance(term, ZeroTerminal):
        return 0.0
    if isinstance(term, QuadraticTerminal):
        return max(float(x @ term.Q_T @ x), 0.0)
    if isinstance(term, HookTerminal):
        return float(term.fn(x))
    raise ConfigurationError(f"oracle cannot evaluate terminal {type(term).__name__}")


def exact_small_dp(
    problem: ProblemSpec, cloud: ParticleCloud, grid: ControlGrid
) -> list:
    """Finite-horizon particle DP by direct enumeration with naive loops.

    Implements exactly the same recursion as the solver but with none of its
    machinery: densities via scipy.stats, ratios in linear space, explicit
    Python loops.  Tiny-instance limits (N <= 5, <= 3 controls, T <= 3) are
    enforced so the quadratic-time naivety stays cheap.
    """
    if not isinstance(problem.mode, FiniteHorizon):
        raise ConfigurationError("exact_small_dp handles finite-horizon problems")
    if cloud.n > 5 or grid.n > 3 or problem.mode.T > 3:
        raise ConfigurationError("instance exceeds tiny-oracle bounds (N<=5, Q<=3, T<=3)")

    T = problem.mode.T
    sd = problem.mode.stage_discount
    xi = [cloud.points[j] for j in range(cloud.n)]
    controls = [grid.controls[q] for q in range(grid.n)]
    x_pdf = [float(_oracle_sampling_pdf(problem.sampling, p[None, :])[0]) for p in xi]
    support = problem.noise.support_box
    state_box = problem.state_space.box

    def admissible(mean: np.ndarray) -> bool:
        if support is None:
            return True
        lo_ok = bool(np.all(mean + support[:, 0] >= state_box[:, 0]))
        hi_ok = bool(np.all(mean + support[:, 1] <= state_box[:, 1]))
        return lo_ok and hi_ok

    omega = [_oracle_terminal(problem.terminal, p) * sd**T for p in xi]
    stages = [list(omega)]
    for k in range(T - 1, -1, -1):
        new = []
        for l in range(cloud.n):
            best = math.inf
            for u in controls:
                mean = _oracle_step(problem.dynamics, xi[l], u)
                if not admissible(mean):
                    continue
                m_ratios = []
                for j in range(cloud.n):
                    w_pdf = float(_oracle_noise_pdf(problem.noise, (xi[j] - mean)[None, :])[0])
                    m_ratios.append(w_pdf / x_pdf[j])
                total = sum(m_ratios)
                if total <= 0.0:
                    continue
                cont = sum(omega[j] * (m_ratios[j] / total) for j in range(cloud.n))
                val = sd**k * _oracle_stage_cost(problem.cost, xi[l], u) + cont
                if val < best:
                    best = val
            if not math.isfinite(best):
                raise ConfigurationError(
                    f"tiny-oracle instance has no admissible control at particle {l}"
                )
            new.append(best)
        omega = new
        stages.append(list(omega))

    stages.reverse()
    return [
        WeightVector(values=np.array(vals), stage_or_iteration=k)
        for k, vals in enumerate(stages)
    ]


# ---------------------------------------------------------------------------
# Quadratic least-squares fit


@dataclass(frozen=True)
class QuadraticFit:
    """OLS fit of values on monomials {1, x_i, x_i x_j}."""

    a2: np.ndarray  # (r, r) symmetric quadratic coefficient
    a1: np.ndarray  # (r,)
    a0: float
    residual_rms: float

    @property
    def a2_scalar(self) -> float:
        return float(self.a2[0, 0])

    @property
    def a1_scalar(self) -> float:
        return float(self.a1[0])


def fit_quadratic(states, values) -> QuadraticFit:
    """Least-squares quadratic surface through (state, value) pairs."""
    X = np.asarray(states, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(values, dtype=float).reshape(-1)
    n, r = X.shape
    if y.shape[0] != n:
        raise ConfigurationError("states/values length mismatch")

    cols = [np.ones(n)]
    index = [("const", 0, 0)]
    for i in range(r):
        cols.append(X[:, i])
        index.append(("lin", i, 0))
    for i in range(r):
        for j in range(i, r):
            cols.append(X[:, i] * X[:, j])
            index.append(("quad", i, j))
    design = np.stack(cols, axis=1)
    if n < design.shape[1]:
        raise ConfigurationError("not enough points to fit a quadratic")
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise ConfigurationError("rank-deficient design matrix for quadratic fit")
    coef, _, _, _ = np.linalg.lstsq(design, y, rcond=None)

    a2 = np.zeros((r, r))
    a1 = np.zeros(r)
    a0 = 0.0
    for c, (kind, i, j) in zip(coef, index):
        if kind == "const":
            a0 = float(c)
        elif kind == "lin":
            a1[i] = float(c)
        elif i == j:
            a2[i, i] = float(c)
        else:
            a2[i, j] = a2[j, i] = float(c) / 2.0
    resid = y - design @ coef
    rms = float(np.sqrt(np.mean(resid**2)))
    return QuadraticFit(a2=a2, a1=a1, a0=a0, residual_rms=rms)


# ---------------------------------------------------------------------------
# Verification batteries (shared by the CLI `verify` command and the tests)


@dataclass
class BatteryResult:
    name: str
    n_cases: int
    n_pass: int
    max_violation: float
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_cases": self.n_cases,
            "n_pass": self.n_pass,
            "max_violation": self.max_violation,
            "passed": self.passed,
            "details": self.details,
        }


def _random_tiny_problem(rng: np.random.Generator, *, mode, n_controls: int):
    """Small random instance: 1-2 state dims, linear dynamics, quadratic cost."""
    r_x = int(rng.integers(1, 3))
    half = float(rng.uniform(1.5, 2.5))
    box = np.stack([-half * np.ones(r_x), half * np.ones(r_x)], axis=1)
    space = StateSpace(box=box)
    F = rng.uniform(-0.8, 0.8, size=(r_x, r_x))
    B = rng.uniform(-1.0, 1.0, size=(r_x, 1))
    sig = rng.uniform(0.7, 1.3, size=r_x)
    noise = GaussianDensity(mean=np.zeros(r_x), cov=np.diag(sig**2))
    qc = float(rng.uniform(0.1, 1.0))
    rc = float(rng.uniform(0.1, 1.0))
    cost = QuadraticCost(Q=qc * np.eye(r_x), R=rc * np.eye(1))
    if rng.random() < 0.5:
        terminal = ZeroTerminal()
    else:
        terminal = QuadraticTerminal(Q_T=float(rng.uniform(0.1, 1.0)) * np.eye(r_x))
    controls = np.sort(rng.uniform(-1.0, 1.0, size=(n_controls, 1)), axis=0)
    problem = ProblemSpec(
        dynamics=LinearDynamics(F=F, B=B),
        cost=cost,
        terminal=terminal,
        noise=noise,
        sampling=UniformBoxDensity(box=box),
        state_space=space,
        control_space=FiniteControls(controls=controls),
        mode=mode,
    )
    return problem


def riccati_battery(n_cases: int = 20, seed: int = 411) -> BatteryResult:
    """Residual and offset-formula invariants on random discounted LQR instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    n_pass = 0
    for _ in range(n_cases):
        r_x = int(rng.integers(1, 3))
        r_u = int(rng.integers(1, 3))
        F = rng.uniform(-1.0, 1.0, size=(r_x, r_x))
        B = rng.uniform(-1.0, 1.0, size=(r_x, r_u))
        A = rng.uniform(-1.0, 1.0, size=(r_x, r_x))
        Q = A @ A.T + 0.1 * np.eye(r_x)
        Rm = np.diag(rng.uniform(0.2, 2.0, size=r_u))
        alpha = float(rng.uniform(0.5, 0.95))
        Sw = np.diag(rng.uniform(0.1, 1.0, size=r_x))
        sol = solve_discounted_riccati(F, B, Q, Rm, alpha, Sw, tol=1e-14)
        G = np.linalg.solve(Rm + alpha * B.T @ sol.X @ B, B.T @ sol.X @ F)
        resid = Q + alpha * F.T @ sol.X @ F - alpha**2 * F.T @ sol.X @ B @ G - sol.X
        r1 = float(np.max(np.abs(resid)))
        r2 = abs(sol.q - alpha * float(np.trace(sol.X @ Sw)) / (1.0 - alpha))
        worst = max(worst, r1, r2)
        if r1 <= 1e-10 and r2 <= 1e-10:
            n_pass += 1
    return BatteryResult(
        name="riccati",
        n_cases=n_cases,
        n_pass=n_pass,
        max_violation=worst,
        passed=n_pass == n_cases,
        details={"tolerance": 1e-10},
    )


def contraction_battery(n_cases: int = 50, seed: int = 1702) -> BatteryResult:
    """sup |T(w) - T(w')| <= alpha sup |w - w'| + 1e-10 on random instances."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    n_pass = 0
    for _ in range(n_cases):
        alpha = float(rng.uniform(0.5, 0.95))
        mode = InfiniteDiscounted(alpha=alpha, tol=1e-3, max_iters=10)
        problem = _random_tiny_problem(rng, mode=mode, n_controls=int(rng.integers(1, 4)))
        n = int(rng.integers(2, 51))
        cloud = draw_particles(
            problem.sampling, problem.state_space, n, seed=int(rng.integers(0, 2**31))
        )
        grid = ControlGrid(controls=problem.control_space.controls, provenance="explicit")
        w1 = rng.uniform(0.0, 10.0, size=n)
        w2 = rng.uniform(0.0, 10.0, size=n)
        t1 = apply_bellman_operator(problem, cloud, grid, w1)
        t2 = apply_bellman_operator(problem, cloud, grid, w2)
        lhs = float(np.max(np.abs(t1 - t2)))
        rhs = alpha * float(np.max(np.abs(w1 - w2)))
        violation = lhs - rhs
        worst = max(worst, violation)
        if violation <= 1e-10:
            n_pass += 1
    return BatteryResult(
        name="contraction",
        n_cases=n_cases,
        n_pass=n_pass,
        max_violation=float(worst),
        passed=n_pass == n_cases,
        details={"slack": 1e-10},
    )


def tiny_dp_battery(n_cases: int = 100, seed: int = 90210) -> BatteryResult:
    """solve_finite_horizon vs exact_small_dp on random tiny instances, 1e-12."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    n_pass = 0
    for _ in range(n_cases):
        T = int(rng.integers(1, 4))
        sd = 1.0 if rng.random() < 0.5 else float(rng.uniform(0.5, 1.0))
        mode = FiniteHorizon(T=T, stage_discount=sd)
        problem = _random_tiny_problem(rng, mode=mode, n_controls=int(rng.integers(1, 4)))
        n = int(rng.integers(1, 6))
        cloud = draw_particles(
            problem.sampling, problem.state_space, n, seed=int(rng.integers(0, 2**31))
        )
        grid = ControlGrid(controls=problem.control_space.controls, provenance="explicit")
        solved = solve_finite_horizon(problem, cloud, grid, options=SolverOptions())
        reference = exact_small_dp(problem, cloud, grid)
        case_worst = 0.0
        ok = True
        for wv, ref in zip(solved.weights, reference):
            diff = np.abs(wv.values - ref.values)
            bound = 1e-12 + 1e-12 * np.abs(ref.values)
            case_worst = max(case_worst, float(np.max(diff - bound)))
            if not np.all(diff <= bound):
                ok = False
        worst = max(worst, case_worst)
        if ok:
            n_pass += 1
    return BatteryResult(
        name="tiny",
        n_cases=n_cases,
        n_pass=n_pass,
        max_violation=worst,
        passed=n_pass == n_cases,
        details={"rtol": 1e-12, "atol": 1e-12},
    )


def is_consistency_battery(
    n_values: Sequence[int] = (100, 1000, 10000, 100000),
    n_seeds: int = 20,
    seed0: int = 7000,
) -> BatteryResult:
    """Importance-sampling estimate vs quadrature for a quadratic test function.

    Mean absolute error over seeds must shrink as the cloud grows (at most one
    adjacent inversion, ordered endpoints) and the relative error at the
    largest cloud must be below 2%.
    """
    box = np.array([[-5.0, 5.0]])
    space = StateSpace(box=box)
    density = UniformBoxDensity(box=box)
    noise = GaussianDensity(mean=[0.0], cov=[[0.25]])
    center = np.array([1.0])
    truth = brute_force_expectation(
        lambda s: np.asarray(s)[:, 0] ** 2, center, noise, rule="gauss", n_per_dim=96
    ).value

    mean_errors = []
    for n in n_values:
        errs = []
        for s in range(n_seeds):
            cloud = draw_particles(density, space, n, seed=seed0 + 1000 * s + n)
            weights = cloud.points[:, 0] ** 2
            row = likelihood_row(cloud, noise, center)
            est = estimate_expectation(cloud, weights, row)
            errs.append(abs(est - truth))
        mean_errors.append(float(np.mean(errs)))

    inversions = sum(
        1 for a, b in zip(mean_errors, mean_errors[1:]) if not (b < a)
    )
    endpoints_ordered = mean_errors[-1] < mean_errors[0]
    rel_err_at_largest = mean_errors[-1] / abs(truth)
    passed = inversions <= 1 and endpoints_ordered and rel_err_at_largest < 0.02
    return BatteryResult(
        name="is",
        n_cases=len(n_values) * n_seeds,
        n_pass=len(n_values) * n_seeds if passed else 0,
        max_violation=float(rel_err_at_largest),
        passed=passed,
        details={
            "truth": truth,
            "mean_errors": mean_errors,
            "n_values": list(n_values),
            "inversions": inversions,
            "endpoints_ordered": endpoints_ordered,
            "relative_error_at_largest": rel_err_at_largest,
        },
    )
