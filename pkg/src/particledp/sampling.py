"""Particle clouds, control grids, and importance-sampling likelihood rows.

The particle cloud plays the role of a mesh: value information lives on the
particles and is read off anywhere else through normalized likelihood ratios
of the process-noise density against the cloud's sampling density.  All
likelihood math runs in log space and is normalized row-wise with the usual
max-shift, so ratios survive even when the unnormalized masses underflow.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import (
    ConfigurationError,
    BoxControls,
    ControlSpace,
    FiniteControls,
    NoiseDensity,
    SamplingDensity,
    StateSpace,
    UniformBoxDensity,
    box_contains,
)

__all__ = [
    "SamplingError",
    "NoSupportOverlapError",
    "ParticleCloud",
    "ControlGrid",
    "LikelihoodRow",
    "draw_particles",
    "sample_control_grid",
    "likelihood_row",
    "estimate_expectation",
    "log_likelihood_matrix",
    "normalize_log_rows",
]

log = logging.getLogger("particledp")

REJECTION_RETRY_CAP = 1000


class SamplingError(RuntimeError):
    """Particle or control sampling failed (retry cap exceeded, bad support)."""


class NoSupportOverlapError(RuntimeError):
    """No particle carries noise-density mass around the predicted mean."""

    def __init__(self, predicted_mean: np.ndarray, nearest_distance: float):
        self.predicted_mean = np.asarray(predicted_mean, dtype=float)
        self.nearest_distance = float(nearest_distance)
        super().__init__(
            f"no particle inside the noise support around predicted mean "
            f"{self.predicted_mean.tolist()} (nearest particle at distance "
            f"{self.nearest_distance:.6g})"
        )


@dataclass(frozen=True)
class ParticleCloud:
    """I.i.d. state samples with their sampling-density evaluations.

    `log_density` stores log X(xi_j); the linear-space `density` property is
    derived from it.  `n_rejected` records how many proposals were discarded
    when an unbounded sampling density was truncated to the state box.
    """

    points: np.ndarray  # (N, r_x)
    log_density: np.ndarray  # (N,)
    seed: int
    n_rejected: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        ld = np.asarray(self.log_density, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ConfigurationError("particle cloud must be a nonempty (N, r_x) array")
        if ld.shape != (pts.shape[0],):
            raise ConfigurationError("log_density length must match particle count")
        if not np.all(np.isfinite(pts)):
            raise ConfigurationError("particles must be finite")
        if not np.all(np.isfinite(ld)):
            raise ConfigurationError("sampling density must be strictly positive at particles")
        pts.setflags(write=False)
        ld.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "log_density", ld)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def r_x(self) -> int:
        return self.points.shape[1]

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    def to_csv(self, path, *, version: str = "", extra_comment: str = "") -> None:
        """One row per particle: x_1..x_{r_x}, density_value."""
        header = [f"x_{d + 1}" for d in range(self.r_x)] + ["density_value"]
        with open(path, "w", newline="") as fh:
            comment = f"# particledp {version} cloud N={self.n} seed={self.seed} r_x={self.r_x}"
            if extra_comment:
                comment += " " + extra_comment
            fh.write(comment + "\n")
            writer = csv.writer(fh)
            writer.writerow(header)
            dens = self.density
            for j in range(self.n):
                writer.writerow([repr(float(v)) for v in self.points[j]] + [repr(float(dens[j]))])

    @classmethod
    def from_csv(cls, path) -> "ParticleCloud":
        path = Path(path)
        with open(path, newline="") as fh:
            first = fh.readline()
            meta = {}
            for token in first.strip().split():
                if "=" in token:
                    key, _, val = token.partition("=")
                    meta[key] = val
            rows = list(csv.reader(fh))
        if not rows:
            raise ConfigurationError(f"{path}: missing header row")
        header, data = rows[0], rows[1:]
        r_x = sum(1 for name in header if name.startswith("x_"))
        pts = np.array([[float(v) for v in row[:r_x]] for row in data])
        dens = np.array([float(row[r_x]) for row in data])
        if "r_x" in meta and int(meta["r_x"]) != r_x:
            raise ConfigurationError(f"{path}: header r_x disagrees with columns")
        if "N" in meta and int(meta["N"]) != len(data):
            raise ConfigurationError(f"{path}: header N disagrees with row count")
        seed = int(meta.get("seed", -1))
        return cls(points=pts, log_density=np.log(dens), seed=seed)


@dataclass(frozen=True)
class ControlGrid:
    """Finite list of control actions the backups minimize over.

    Grids produced by `sample_control_grid` are nonempty; a zero-row grid can
    only arise from constraint filtering, where emptiness is a signal rather
    than an error.
    """

    controls: np.ndarray  # (n_controls, r_u)
    provenance: str  # "explicit" or "sampled"
    seed: int | None = None

    def __post_init__(self):
        ctl = np.asarray(self.controls, dtype=float)
        if ctl.ndim != 2:
            raise ConfigurationError("control grid must be an (n, r_u) array")
        ctl.setflags(write=False)
        object.__setattr__(self, "controls", ctl)

    @property
    def n(self) -> int:
        return self.controls.shape[0]

    @property
    def r_u(self) -> int:
        return self.controls.shape[1]

    def subset(self, mask: np.ndarray) -> "ControlGrid":
        return ControlGrid(
            controls=self.controls[mask], provenance=self.provenance, seed=self.seed
        )


@dataclass(frozen=True)
class LikelihoodRow:
    """Normalized importance likelihoods for one (state, control) pair.

    `values[j]` is proportional to W(xi_j - predicted_mean) / X(xi_j) and the
    row sums to one.  `raw_mass` is the unnormalized sum of the ratios; it can
    underflow to zero in linear space while the normalized row is still well
    defined, in which case `log_raw_mass` remains finite.
    """

    values: np.ndarray  # (N,)
    raw_mass: float
    log_raw_mass: float


def draw_particles(
    density: SamplingDensity, space: StateSpace, n: int, seed: int
) -> ParticleCloud:
    """Draw an i.i.d. particle cloud inside the state box.

    A uniform sampling density must coincide with the state box.  Unbounded
    densities (Gaussian, mixtures of Gaussians) are rejection-sampled into the
    box; the implied truncation constant cancels in every normalized ratio, so
    stored density values are the analytic (untruncated) ones.
    """
    if n < 1:
        raise ConfigurationError("particle count must be >= 1")
    if density.dim != space.r_x:
        raise ConfigurationError("sampling density dimension does not match state space")
    rng = np.random.default_rng(seed)

    if isinstance(density, UniformBoxDensity):
        if not np.array_equal(density.box, space.box):
            raise ConfigurationError("uniform sampling density must cover exactly the state box")
        points = density.sample(rng, n)
        n_rejected = 0
    else:
        points = np.empty((n, space.r_x))
        filled = 0
        n_rejected = 0
        for _ in range(REJECTION_RETRY_CAP):
            draw = density.sample(rng, n - filled)
            inside = space.contains(draw)
            keep = draw[inside]
            n_rejected += int((~inside).sum())
            take = min(len(keep), n - filled)
            points[filled : filled + take] = keep[:take]
            filled += take
            if filled == n:
                break
        else:
            raise SamplingError(
                f"rejection sampling failed to place {n} particles inside the state box "
                f"after {REJECTION_RETRY_CAP} rounds"
            )

    log_density = np.asarray(density.logpdf(points))
    if not np.all(np.isfinite(log_density)):
        raise SamplingError("sampling density is not strictly positive at drawn particles")
    return ParticleCloud(points=points, log_density=log_density, seed=seed, n_rejected=n_rejected)


def sample_control_grid(space: ControlSpace, seed: int = 0) -> ControlGrid:
    """Materialize the control grid: explicit lists pass through, boxes are sampled."""
    if isinstance(space, FiniteControls):
        return ControlGrid(controls=space.controls, provenance="explicit", seed=None)
    if not isinstance(space, BoxControls):
        raise ConfigurationError(f"unknown control space type: {type(space).__name__}")

    rng = np.random.default_rng(seed)
    density = space.density if space.density is not None else UniformBoxDensity(space.box)
    if density.dim != space.r_u:
        raise ConfigurationError("control sampling density dimension mismatch")
    n = space.n_samples
    controls = np.empty((n, space.r_u))
    filled = 0
    for _ in range(REJECTION_RETRY_CAP):
        draw = density.sample(rng, n - filled)
        keep = draw[box_contains(space.box, draw)]
        take = min(len(keep), n - filled)
        controls[filled : filled + take] = keep[:take]
        filled += take
        if filled == n:
            break
    else:
        raise SamplingError("control sampling failed to fill the grid inside the control box")
    return ControlGrid(controls=controls, provenance="sampled", seed=seed)


def log_likelihood_matrix(
    cloud: ParticleCloud, noise: NoiseDensity, predicted_means: np.ndarray
) -> np.ndarray:
    """log M[r, j] = log W(xi_j - predicted_means[r]) - log X(xi_j).

    Shape (R, N).  All operations are elementwise or reduce over fixed
    per-row axes, so results do not depend on how rows are batched.
    """
    means = np.atleast_2d(np.asarray(predicted_means, dtype=float))
    logw = noise.logpdf_rows(cloud.points, means)
    return logw - cloud.log_density[None, :]


def normalize_log_rows(log_m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise self-normalization of log-likelihoods.

    Returns (values, log_raw_mass, no_overlap) where `values` rows sum to one
    (zero rows where no particle has support) and `no_overlap[r]` flags rows
    whose mass is identically zero.
    """
    row_max = np.max(log_m, axis=1)
    no_overlap = ~np.isfinite(row_max)
    shift = np.where(no_overlap, 0.0, row_max)
    with np.errstate(invalid="ignore"):
        expm = np.exp(log_m - shift[:, None])
    expm[no_overlap] = 0.0
    row_sum = np.sum(expm, axis=1)
    values = np.zeros_like(expm)
    ok = ~no_overlap
    values[ok] = expm[ok] / row_sum[ok, None]
    log_raw_mass = np.where(no_overlap, -np.inf, shift + np.log(np.where(ok, row_sum, 1.0)))
    return values, log_raw_mass, no_overlap


def likelihood_row(
    cloud: ParticleCloud,
    noise: NoiseDensity,
    predicted_mean,
    *,
    on_no_overlap: str = "error",
) -> LikelihoodRow:
    """Normalized importance likelihoods c_j for a single predicted mean f(x, u).

    `on_no_overlap` selects what happens when no particle lies in the noise
    support: "error" raises NoSupportOverlapError, "nearest" assigns the full
    mass to the nearest particle (logged).
    """
    mean = np.asarray(predicted_mean, dtype=float).reshape(-1)
    if mean.shape != (cloud.r_x,):
        raise ConfigurationError("predicted mean dimension does not match cloud")
    log_m = log_likelihood_matrix(cloud, noise, mean[None, :])
    values, log_raw_mass, no_overlap = normalize_log_rows(log_m)
    if no_overlap[0]:
        dists = np.linalg.norm(cloud.points - mean, axis=1)
        nearest = int(np.argmin(dists))
        if on_no_overlap == "nearest":
            log.warning(
                "no support overlap at predicted mean %s; assigning mass to nearest "
                "particle %d at distance %.6g",
                mean.tolist(),
                nearest,
                dists[nearest],
            )
            one_hot = np.zeros(cloud.n)
            one_hot[nearest] = 1.0
            return LikelihoodRow(values=one_hot, raw_mass=0.0, log_raw_mass=-np.inf)
        raise NoSupportOverlapError(mean, dists[nearest])
    lrm = float(log_raw_mass[0])
    row = values[0]
    row.setflags(write=False)
    return LikelihoodRow(values=row, raw_mass=float(np.exp(lrm)), log_raw_mass=lrm)


def estimate_expectation(cloud: ParticleCloud, weights, row: LikelihoodRow) -> float:
    """Self-normalized importance-sampling estimate sum_j weights_j * c_j.

    Accepts a plain array or anything exposing `.values` (a weight vector).
    The result is clamped into [min(weights), max(weights)]: the row is a
    convex combination, so the estimate must stay inside the weight hull.
    """
    w = np.asarray(getattr(weights, "values", weights), dtype=float).reshape(-1)
    if w.shape[0] != cloud.n or row.values.shape[0] != cloud.n:
        raise ConfigurationError("weights/row length must match the particle count")
    est = float(np.einsum("j,j->", row.values, w, optimize=False))
    return float(min(max(est, w.min()), w.max()))
