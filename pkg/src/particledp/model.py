"""Problem data for particle dynamic programming.

Defines the dynamics, stage/terminal costs, process-noise and state-sampling
densities, and the state/control sets consumed by the sampling and solver
modules.  All objects are immutable after construction and safe to share
between worker threads.

Densities carry their parameters in linear space but are *evaluated* in log
space internally; plain density values are only produced by exponentiating
inside normalized ratios (see `sampling.likelihood_row`) or at the public
`eval_*` entry points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

__all__ = [
    "ConfigurationError",
    "InvariantViolationError",
    "as_box",
    "box_volume",
    "box_contains",
    "StateSpace",
    "FiniteControls",
    "BoxControls",
    "ControlSpace",
    "GaussianDensity",
    "TruncatedGaussianDensity",
    "UniformBoxDensity",
    "MixtureDensity",
    "NoiseDensity",
    "SamplingDensity",
    "LinearDynamics",
    "Bilinear2DDynamics",
    "HookDynamics",
    "DynamicsModel",
    "QuadraticCost",
    "HookCost",
    "StageCost",
    "QuadraticTerminal",
    "ZeroTerminal",
    "HookTerminal",
    "TerminalCost",
    "eval_dynamics",
    "eval_noise_density",
    "eval_stage_cost",
    "eval_terminal_cost",
]


class ConfigurationError(ValueError):
    """Inconsistent or invalid problem data (dimensions, definiteness, bounds)."""


class InvariantViolationError(RuntimeError):
    """A user hook broke a contract it promised (e.g. negative stage cost)."""


# ---------------------------------------------------------------------------
# Axis-aligned boxes.  Represented as float arrays of shape (dim, 2) with
# [:, 0] the lower and [:, 1] the upper bounds; membership is closed.


def as_box(bounds, *, name: str = "box", allow_thin: bool = False) -> np.ndarray:
    """Validate and normalize box bounds to a float array of shape (dim, 2)."""
    box = np.asarray(bounds, dtype=float)
    if box.ndim != 2 or box.shape[1] != 2 or box.shape[0] < 1:
        raise ConfigurationError(f"{name}: expected shape (dim, 2), got {box.shape}")
    if not np.all(np.isfinite(box)):
        raise ConfigurationError(f"{name}: bounds must be finite")
    lo, hi = box[:, 0], box[:, 1]
    if allow_thin:
        if np.any(lo > hi):
            raise ConfigurationError(f"{name}: lower bound exceeds upper bound")
    elif np.any(lo >= hi):
        raise ConfigurationError(f"{name}: box must have positive volume")
    box.setflags(write=False)
    return box


def box_volume(box: np.ndarray) -> float:
    return float(np.prod(box[:, 1] - box[:, 0]))


def box_contains(box: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Closed-box membership for one point (dim,) or a batch (n, dim)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    inside = np.all((pts >= box[:, 0]) & (pts <= box[:, 1]), axis=1)
    return inside if np.asarray(points).ndim > 1 else bool(inside[0])


def _as_vector(x, dim: int, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(-1)
    if v.shape != (dim,):
        raise ConfigurationError(f"{name}: expected length {dim}, got shape {np.shape(x)}")
    if not np.all(np.isfinite(v)):
        raise ConfigurationError(f"{name}: entries must be finite")
    return v


def _as_matrix(m, rows: int, cols: int, name: str) -> np.ndarray:
    a = np.asarray(m, dtype=float)
    if a.shape != (rows, cols):
        raise ConfigurationError(f"{name}: expected shape ({rows}, {cols}), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ConfigurationError(f"{name}: entries must be finite")
    return a


def _check_spd(cov: np.ndarray, name: str) -> np.ndarray:
    """Cholesky factor of an SPD matrix, or a ConfigurationError."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ConfigurationError(f"{name}: covariance must be square, got {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise ConfigurationError(f"{name}: covariance must be symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError(f"{name}: covariance is not positive definite") from exc


def _check_psd(mat: np.ndarray, name: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ConfigurationError(f"{name}: must be square, got {mat.shape}")
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise ConfigurationError(f"{name}: must be symmetric")
    eigs = np.linalg.eigvalsh(mat)
    if eigs.min() < -1e-10 * max(1.0, abs(eigs.max())):
        raise ConfigurationError(f"{name}: must be positive semidefinite")
    return mat


# ---------------------------------------------------------------------------
# State and control sets


@dataclass(frozen=True)
class StateSpace:
    """Compact state set: an axis-aligned box with positive volume."""

    box: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "box", as_box(self.box, name="state box"))

    @property
    def r_x(self) -> int:
        return self.box.shape[0]

    @property
    def volume(self) -> float:
        return box_volume(self.box)

    def contains(self, points) -> np.ndarray:
        return box_contains(self.box, points)


@dataclass(frozen=True)
class FiniteControls:
    """Explicit finite control set; nonempty and duplicate-free."""

    controls: np.ndarray

    def __post_init__(self):
        ctl = np.asarray(self.controls, dtype=float)
        if ctl.ndim == 1:
            ctl = ctl[:, None]
        if ctl.ndim != 2 or ctl.shape[0] < 1:
            raise ConfigurationError("finite control set must be a nonempty (n, r_u) array")
        if not np.all(np.isfinite(ctl)):
            raise ConfigurationError("controls must be finite")
        if len({tuple(row) for row in ctl.tolist()}) != ctl.shape[0]:
            raise ConfigurationError("finite control set contains duplicates")
        ctl.setflags(write=False)
        object.__setattr__(self, "controls", ctl)

    @property
    def r_u(self) -> int:
        return self.controls.shape[1]


@dataclass(frozen=True)
class BoxControls:
    """Compact control box to be discretized by i.i.d. draws from `density`."""

    box: np.ndarray
    n_samples: int
    density: "SamplingDensity | None" = None  # None -> uniform on the box

    def __post_init__(self):
        object.__setattr__(self, "box", as_box(self.box, name="control box"))
        if self.n_samples < 1:
            raise ConfigurationError("control sample count must be >= 1")

    @property
    def r_u(self) -> int:
        return self.box.shape[0]


ControlSpace = Union[FiniteControls, BoxControls]


# ---------------------------------------------------------------------------
# Densities


class GaussianDensity:
    """Multivariate normal density with full support."""

    def __init__(self, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ConfigurationError("gaussian: mean/cov dimensions do not match")
        self.mean = mean
        self.cov = cov
        self._chol = _check_spd(cov, "gaussian")
        # inverse of the lower Cholesky factor; dimensions are small here
        self._chol_inv = np.linalg.inv(self._chol)
        self._log_norm = -0.5 * (
            mean.size * math.log(2.0 * math.pi)
            + 2.0 * float(np.sum(np.log(np.diag(self._chol))))
        )
        self.mean.setflags(write=False)
        self.cov.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def support_box(self):
        return None

    def logpdf(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        z = np.einsum("nk,dk->nd", pts - self.mean, self._chol_inv, optimize=False)
        quad = np.einsum("nd,nd->n", z, z, optimize=False)
        out = self._log_norm - 0.5 * quad
        return out if np.asarray(points).ndim > 1 else float(out[0])

    def logpdf_rows(self, points: np.ndarray, means: np.ndarray) -> np.ndarray:
        """log pdf(points[j] - means[r]) for all (r, j); shape (R, N).

        Fixed elementwise/per-row operation order: results do not depend on
        how callers batch the `means` argument.
        """
        diff = (points[None, :, :] - self.mean) - means[:, None, :]
        z = np.einsum("rnk,dk->rnd", diff, self._chol_inv, optimize=False)
        quad = np.einsum("rnd,rnd->rn", z, z, optimize=False)
        return self._log_norm - 0.5 * quad

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self._chol.T


class UniformBoxDensity:
    """Uniform density on an axis-aligned box."""

    def __init__(self, box):
        self.box = as_box(box, name="uniform density box")
        self._log_inv_vol = -math.log(box_volume(self.box))

    @property
    def dim(self) -> int:
        return self.box.shape[0]

    @property
    def support_box(self) -> np.ndarray:
        return self.box

    def logpdf(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = np.all((pts >= self.box[:, 0]) & (pts <= self.box[:, 1]), axis=1)
        out = np.where(inside, self._log_inv_vol, -np.inf)
        return out if np.asarray(points).ndim > 1 else float(out[0])

    def logpdf_rows(self, points: np.ndarray, means: np.ndarray) -> np.ndarray:
        R, N = means.shape[0], points.shape[0]
        inside = np.ones((R, N), dtype=bool)
        for d in range(self.dim):
            # points[j, d] - means[r, d] must lie in [lo_d, hi_d]
            lo = means[:, d, None] + self.box[d, 0]
            hi = means[:, d, None] + self.box[d, 1]
            inside &= (points[None, :, d] >= lo) & (points[None, :, d] <= hi)
        out = np.full((R, N), -np.inf)
        out[inside] = self._log_inv_vol
        return out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.box[:, 0], self.box[:, 1], size=(n, self.dim))


class TruncatedGaussianDensity:
    """Gaussian truncated to a box and renormalized (see `Remark`-style use).

    The normalization constant is cached at construction and the resulting
    density is checked to integrate to 1 over the box to 1e-6.  General
    (non-diagonal) covariances are supported for dim <= 3; diagonal ones for
    any dimension.
    """

    def __init__(self, mean, cov, box):
        self._base = GaussianDensity(mean, cov)
        self.box = as_box(box, name="truncation box")
        if self.box.shape[0] != self._base.dim:
            raise ConfigurationError("truncated gaussian: box dimension mismatch")
        self.mean = self._base.mean
        self.cov = self._base.cov
        diagonal = np.allclose(self.cov, np.diag(np.diag(self.cov)), atol=1e-14)
        if not diagonal and self._base.dim > 3:
            raise ConfigurationError(
                "truncated gaussian with non-diagonal covariance supported only up to dim 3"
            )
        self._log_mass = self._box_log_mass(diagonal)
        if not math.isfinite(self._log_mass):
            raise ConfigurationError("truncation box carries no Gaussian mass")
        check = self._integral_check()
        if abs(check - 1.0) > 1e-6:
            raise ConfigurationError(
                f"truncated gaussian fails normalization check: integral={check:.8f}"
            )

    def _box_log_mass(self, diagonal: bool) -> float:
        from scipy.stats import norm

        if diagonal:
            sig = np.sqrt(np.diag(self.cov))
            lo = (self.box[:, 0] - self.mean) / sig
            hi = (self.box[:, 1] - self.mean) / sig
            per_dim = norm.cdf(hi) - norm.cdf(lo)
            if np.any(per_dim <= 0):
                return -np.inf
            return float(np.sum(np.log(per_dim)))
        # Gauss-Legendre tensor quadrature for correlated covariances
        nodes, weights = np.polynomial.legendre.leggauss(64)
        grids, wgts = [], []
        for d in range(self._base.dim):
            lo, hi = self.box[d]
            grids.append(0.5 * (hi - lo) * nodes + 0.5 * (hi + lo))
            wgts.append(0.5 * (hi - lo) * weights)
        mesh = np.meshgrid(*grids, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        wmesh = np.meshgrid(*wgts, indexing="ij")
        w = np.prod(np.stack([m.ravel() for m in wmesh], axis=1), axis=1)
        mass = float(np.sum(np.exp(self._base.logpdf(pts)) * w))
        return math.log(mass) if mass > 0 else -np.inf

    def _integral_check(self) -> float:
        """Gauss-Legendre integral of the truncated pdf over its box.

        Uses a different rule/order than the cached normalizer (closed-form
        CDF products for diagonal covariances, order-64 quadrature otherwise),
        so it genuinely cross-checks the normalization.
        """
        n = 96 if self._base.dim == 1 else (48 if self._base.dim == 2 else 24)
        nodes, weights = np.polynomial.legendre.leggauss(n)
        axes, wgts = [], []
        for d in range(self._base.dim):
            lo, hi = self.box[d]
            axes.append(0.5 * (hi - lo) * nodes + 0.5 * (hi + lo))
            wgts.append(0.5 * (hi - lo) * weights)
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        wmesh = np.meshgrid(*wgts, indexing="ij")
        w = np.prod(np.stack([m.ravel() for m in wmesh], axis=1), axis=1)
        vals = np.exp(self.logpdf(pts))
        return float(np.sum(vals * w))

    @property
    def dim(self) -> int:
        return self._base.dim

    @property
    def support_box(self) -> np.ndarray:
        return self.box

    def logpdf(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        base = np.asarray(self._base.logpdf(pts)) - self._log_mass
        inside = np.all((pts >= self.box[:, 0]) & (pts <= self.box[:, 1]), axis=1)
        out = np.where(inside, base, -np.inf)
        return out if np.asarray(points).ndim > 1 else float(out[0])

    def logpdf_rows(self, points: np.ndarray, means: np.ndarray) -> np.ndarray:
        out = self._base.logpdf_rows(points, means) - self._log_mass
        R, N = out.shape
        inside = np.ones((R, N), dtype=bool)
        for d in range(self.dim):
            lo = means[:, d, None] + self.box[d, 0]
            hi = means[:, d, None] + self.box[d, 1]
            inside &= (points[None, :, d] >= lo) & (points[None, :, d] <= hi)
        out[~inside] = -np.inf
        return out

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.empty((n, self.dim))
        filled = 0
        for _ in range(1000):
            draw = self._base.sample(rng, n - filled)
            keep = draw[box_contains(self.box, draw)]
            take = min(len(keep), n - filled)
            out[filled : filled + take] = keep[:take]
            filled += take
            if filled == n:
                return out
        raise ConfigurationError("truncated gaussian: rejection sampling retry cap exceeded")


class MixtureDensity:
    """Finite mixture of component densities (sampling densities only)."""

    def __init__(self, components: Sequence, weights: Sequence[float]):
        if len(components) < 1 or len(components) != len(weights):
            raise ConfigurationError("mixture: components/weights length mismatch")
        w = np.asarray(weights, dtype=float)
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ConfigurationError("mixture: weights must be positive and finite")
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise ConfigurationError("mixture: components disagree on dimension")
        self.components = tuple(components)
        self.weights = w / w.sum()
        self._log_weights = np.log(self.weights)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def support_box(self):
        boxes = [c.support_box for c in self.components]
        if any(b is None for b in boxes):
            return None
        lo = np.min([b[:, 0] for b in boxes], axis=0)
        hi = np.max([b[:, 1] for b in boxes], axis=0)
        return np.stack([lo, hi], axis=1)

    def logpdf(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        stacked = np.stack(
            [np.asarray(c.logpdf(pts)) + lw for c, lw in zip(self.components, self._log_weights)]
        )
        m = stacked.max(axis=0)
        safe_m = np.where(np.isfinite(m), m, 0.0)
        out = safe_m + np.log(np.sum(np.exp(stacked - safe_m), axis=0))
        out = np.where(np.isfinite(m), out, -np.inf)
        return out if np.asarray(points).ndim > 1 else float(out[0])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.choice(len(self.components), size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for i in range(n):  # sequential: one RNG stream, reproducible
            out[i] = self.components[idx[i]].sample(rng, 1)[0]
        return out


NoiseDensity = Union[GaussianDensity, TruncatedGaussianDensity, UniformBoxDensity]
SamplingDensity = Union[UniformBoxDensity, GaussianDensity, MixtureDensity]


# ---------------------------------------------------------------------------
# Dynamics


@dataclass(frozen=True)
class LinearDynamics:
    """x' = F x + B u."""

    F: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if F.shape[0] != F.shape[1]:
            raise ConfigurationError(f"F must be square, got {F.shape}")
        if B.shape[0] != F.shape[0]:
            raise ConfigurationError(f"B rows must match state dimension, got {B.shape}")
        if not (np.all(np.isfinite(F)) and np.all(np.isfinite(B))):
            raise ConfigurationError("dynamics matrices must be finite")
        F.setflags(write=False)
        B.setflags(write=False)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "B", B)

    @property
    def r_x(self) -> int:
        return self.F.shape[0]

    @property
    def r_u(self) -> int:
        return self.B.shape[1]

    def step_many(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        return states @ self.F.T + controls @ self.B.T

    def predicted_means(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        """f(states[l], controls[q]) for all pairs; shape (n_states, n_controls, r_x)."""
        fx = states @ self.F.T
        bu = controls @ self.B.T
        return fx[:, None, :] + bu[None, :, :]


@dataclass(frozen=True)
class Bilinear2DDynamics:
    """Two-state benchmark with a bilinear coupling term and scalar input.

    x1' = 0.9 x1 + 0.2 x2
    x2' = -0.15 x1 + 0.9 x2 + 0.05 x1 x2 + u
    """

    @property
    def r_x(self) -> int:
        return 2

    @property
    def r_u(self) -> int:
        return 1

    def step_many(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        x1, x2 = states[:, 0], states[:, 1]
        out = np.empty_like(states)
        out[:, 0] = 0.9 * x1 + 0.2 * x2
        out[:, 1] = -0.15 * x1 + 0.9 * x2 + 0.05 * x1 * x2 + controls[:, 0]
        return out

    def predicted_means(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        x1, x2 = states[:, 0], states[:, 1]
        n, q = states.shape[0], controls.shape[0]
        out = np.empty((n, q, 2))
        out[:, :, 0] = (0.9 * x1 + 0.2 * x2)[:, None]
        out[:, :, 1] = (-0.15 * x1 + 0.9 * x2 + 0.05 * x1 * x2)[:, None] + controls[None, :, 0]
        return out


@dataclass(frozen=True)
class HookDynamics:
    """User-supplied transition map f(x, u) -> x', declared dimensions."""

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    r_x: int
    r_u: int

    def step_many(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        out = np.empty((states.shape[0], self.r_x))
        for i in range(states.shape[0]):
            out[i] = _as_vector(self.fn(states[i], controls[i]), self.r_x, "hook dynamics output")
        return out

    def predicted_means(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        n, q = states.shape[0], controls.shape[0]
        out = np.empty((n, q, self.r_x))
        for i in range(n):
            for j in range(q):
                out[i, j] = _as_vector(
                    self.fn(states[i], controls[j]), self.r_x, "hook dynamics output"
                )
        return out


DynamicsModel = Union[LinearDynamics, Bilinear2DDynamics, HookDynamics]


# ---------------------------------------------------------------------------
# Costs


@dataclass(frozen=True)
class QuadraticCost:
    """Stage cost x'Qx + u'Ru with Q PSD and R PD."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = _check_psd(np.atleast_2d(np.asarray(self.Q, dtype=float)), "Q")
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        _check_spd(R, "R")  # positive definite
        Q.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @property
    def r_x(self) -> int:
        return self.Q.shape[0]

    @property
    def r_u(self) -> int:
        return self.R.shape[0]

    def stage_matrix(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        """l(states[l], controls[q]) for all pairs; shape (n_states, n_controls)."""
        xq = np.einsum("ni,ij,nj->n", states, self.Q, states, optimize=False)
        ur = np.einsum("qi,ij,qj->q", controls, self.R, controls, optimize=False)
        return np.maximum(xq[:, None] + ur[None, :], 0.0)


@dataclass(frozen=True)
class HookCost:
    """User-supplied stage cost l(x, u) -> nonnegative scalar."""

    fn: Callable[[np.ndarray, np.ndarray], float]
    r_x: int
    r_u: int

    def stage_matrix(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        out = np.empty((states.shape[0], controls.shape[0]))
        for i in range(states.shape[0]):
            for j in range(controls.shape[0]):
                out[i, j] = float(self.fn(states[i], controls[j]))
        if np.any(out < 0):
            raise InvariantViolationError("hook stage cost returned a negative value")
        if not np.all(np.isfinite(out)):
            raise InvariantViolationError("hook stage cost returned a non-finite value")
        return out


StageCost = Union[QuadraticCost, HookCost]


@dataclass(frozen=True)
class QuadraticTerminal:
    Q_T: np.ndarray

    def __post_init__(self):
        Q = _check_psd(np.atleast_2d(np.asarray(self.Q_T, dtype=float)), "Q_T")
        Q.setflags(write=False)
        object.__setattr__(self, "Q_T", Q)

    def terminal_many(self, states: np.ndarray) -> np.ndarray:
        vals = np.einsum("ni,ij,nj->n", states, self.Q_T, states, optimize=False)
        return np.maximum(vals, 0.0)


@dataclass(frozen=True)
class ZeroTerminal:
    def terminal_many(self, states: np.ndarray) -> np.ndarray:
        return np.zeros(states.shape[0])


@dataclass(frozen=True)
class HookTerminal:
    fn: Callable[[np.ndarray], float]

    def terminal_many(self, states: np.ndarray) -> np.ndarray:
        out = np.array([float(self.fn(s)) for s in states])
        if np.any(out < 0) or not np.all(np.isfinite(out)):
            raise InvariantViolationError("hook terminal cost must be finite and nonnegative")
        return out


TerminalCost = Union[QuadraticTerminal, ZeroTerminal, HookTerminal]


# ---------------------------------------------------------------------------
# Public evaluation operations


def eval_dynamics(model: DynamicsModel, x, u) -> np.ndarray:
    """Noise-free transition f(x, u); deterministic in its inputs."""
    xv = _as_vector(x, model.r_x, "state")
    uv = _as_vector(u, model.r_u, "control")
    out = model.step_many(xv[None, :], uv[None, :])[0]
    if not np.all(np.isfinite(out)):
        raise InvariantViolationError("dynamics produced a non-finite state")
    return out


def eval_noise_density(density: NoiseDensity, point) -> float:
    """Density value at `point`; zero outside bounded supports."""
    pv = _as_vector(point, density.dim, "point")
    logp = density.logpdf(pv)
    return math.exp(logp) if math.isfinite(logp) else 0.0


def eval_sampling_density(density: SamplingDensity, point) -> float:
    pv = _as_vector(point, density.dim, "point")
    logp = density.logpdf(pv)
    return math.exp(logp) if math.isfinite(logp) else 0.0


def eval_stage_cost(cost: StageCost, x, u) -> float:
    xv = _as_vector(x, cost.r_x, "state")
    uv = _as_vector(u, cost.r_u, "control")
    return float(cost.stage_matrix(xv[None, :], uv[None, :])[0, 0])


def eval_terminal_cost(cost: TerminalCost, x) -> float:
    xv = np.asarray(x, dtype=float).reshape(-1)
    return float(cost.terminal_many(xv[None, :])[0])
