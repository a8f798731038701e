"""Probabilistic (chance) constraints for the particle DP solvers.

A safe set is a union of axis-aligned boxes declared either directly or via
its complement.  Particles falling in the unsafe region seed the infeasible
index set; the importance likelihoods then estimate, for any state/control,
the probability of landing safely, and controls below the 1 - epsilon
threshold are filtered out of the backups.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import ConfigurationError, StateSpace, as_box
from .sampling import ControlGrid, LikelihoodRow, ParticleCloud, likelihood_row

__all__ = [
    "AllInfeasibleError",
    "SafeSet",
    "ConstraintSpec",
    "initialize_infeasible_set",
    "safety_probability",
    "admissible_controls",
    "apply_constraint_adaptation",
    "forward_invariance_mask",
]

log = logging.getLogger("particledp")


class AllInfeasibleError(RuntimeError):
    """Every particle ended up infeasible; the constrained problem is empty."""


@dataclass(frozen=True)
class SafeSet:
    """Safe region inside the state box, stored as a union of boxes.

    `boxes` are the declared boxes; `declared` says whether they describe the
    safe set itself or its complement.  Boxes are clipped to the state box at
    construction and must intersect it.
    """

    boxes: tuple
    declared: str  # "safe" or "unsafe"
    state_box: np.ndarray

    @classmethod
    def from_boxes(cls, boxes, declared: str, space: StateSpace) -> "SafeSet":
        if declared not in ("safe", "unsafe"):
            raise ConfigurationError("safe set declaration must be 'safe' or 'unsafe'")
        if not boxes:
            raise ConfigurationError("safe set needs at least one box")
        clipped = []
        for i, b in enumerate(boxes):
            box = as_box(b, name=f"{declared} box {i}", allow_thin=True)
            if box.shape[0] != space.r_x:
                raise ConfigurationError(f"{declared} box {i}: dimension mismatch")
            lo = np.maximum(box[:, 0], space.box[:, 0])
            hi = np.minimum(box[:, 1], space.box[:, 1])
            if np.any(lo > hi):
                raise ConfigurationError(
                    f"{declared} box {i} does not intersect the state box"
                )
            clip = np.stack([lo, hi], axis=1)
            clip.setflags(write=False)
            clipped.append(clip)
        return cls(boxes=tuple(clipped), declared=declared, state_box=space.box)

    def is_safe(self, points) -> np.ndarray:
        """Exact pointwise membership in the safe set (boxes are closed)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        in_union = np.zeros(pts.shape[0], dtype=bool)
        for box in self.boxes:
            in_union |= np.all((pts >= box[:, 0]) & (pts <= box[:, 1]), axis=1)
        safe = in_union if self.declared == "safe" else ~in_union
        return safe if np.asarray(points).ndim > 1 else bool(safe[0])


@dataclass
class ConstraintSpec:
    """Chance-constraint data plus the evolving infeasible index set."""

    safe_set: SafeSet
    epsilon: float
    infeasible: set = field(default_factory=set)
    infeasible_mode: str = "penalty"  # or "renormalize"
    infeasible_value: float | None = None  # None -> 10 x max feasible initial weight

    def __post_init__(self):
        if not (0.0 <= self.epsilon < 1.0):
            raise ConfigurationError("violation probability epsilon must be in [0, 1)")
        if self.infeasible_mode not in ("penalty", "renormalize"):
            raise ConfigurationError("infeasible mode must be 'penalty' or 'renormalize'")

    def infeasible_mask(self, n: int) -> np.ndarray:
        mask = np.zeros(n, dtype=bool)
        if self.infeasible:
            mask[np.fromiter(self.infeasible, dtype=int)] = True
        return mask


def initialize_infeasible_set(cloud: ParticleCloud, safe: SafeSet) -> set:
    """Indices of particles lying in the unsafe region."""
    unsafe = ~safe.is_safe(cloud.points)
    return set(int(i) for i in np.nonzero(unsafe)[0])


def safety_probability(
    cloud: ParticleCloud, spec: ConstraintSpec, row: LikelihoodRow
) -> float:
    """Estimated probability of landing in the safe set: 1 - sum_{j in I} c_j.

    Clamped to [0, 1]; exactly 1 with an empty infeasible set and exactly 0
    when every particle is infeasible (the estimator short-circuits there so
    normalization round-off cannot leak through).
    """
    n = cloud.n
    if not spec.infeasible:
        return 1.0
    if len(spec.infeasible) == n:
        return 0.0
    mask = spec.infeasible_mask(n).astype(float)
    unsafe_mass = float(np.einsum("j,j->", row.values, mask, optimize=False))
    return float(min(max(1.0 - unsafe_mass, 0.0), 1.0))


def forward_invariance_mask(
    predicted_means: np.ndarray, noise, space: StateSpace
) -> np.ndarray:
    """Which predicted means keep the next state inside the state box surely.

    For bounded noise supports this checks f(x, u) + supp(W) within the state
    box, componentwise.  Unbounded noise cannot satisfy the requirement; the
    caller is expected to skip the screen (with a warning) in that case.
    """
    support = noise.support_box
    if support is None:
        raise ConfigurationError("forward-invariance screen needs bounded noise support")
    means = np.atleast_2d(np.asarray(predicted_means, dtype=float))
    lo_ok = means + support[:, 0] >= space.box[:, 0]
    hi_ok = means + support[:, 1] <= space.box[:, 1]
    return np.all(lo_ok & hi_ok, axis=1)


def admissible_controls(
    x,
    grid: ControlGrid,
    cloud: ParticleCloud,
    spec: ConstraintSpec | None,
    dynamics,
    noise,
    space: StateSpace,
    *,
    on_no_overlap: str = "error",
) -> ControlGrid:
    """Filter the control grid at state `x` down to the permissible set.

    Keeps controls whose estimated safety probability is at least
    1 - epsilon (boundary ties admissible) and, when the noise support is
    bounded, whose one-step reachable set stays inside the state box.  An
    empty result is returned, not raised; callers decide what emptiness means.
    """
    xv = np.asarray(x, dtype=float).reshape(-1)
    means = dynamics.predicted_means(xv[None, :], grid.controls)[0]  # (n_controls, r_x)
    keep = np.ones(grid.n, dtype=bool)

    if noise.support_box is not None:
        keep &= forward_invariance_mask(means, noise, space)
    else:
        _warn_unbounded_screen_once()

    if spec is not None and spec.infeasible:
        for q in range(grid.n):
            if not keep[q]:
                continue
            try:
                row = likelihood_row(cloud, noise, means[q], on_no_overlap=on_no_overlap)
            except Exception:
                keep[q] = False
                continue
            keep[q] = safety_probability(cloud, spec, row) >= 1.0 - spec.epsilon
    return grid.subset(keep)


_warned_unbounded = False


def _warn_unbounded_screen_once() -> None:
    global _warned_unbounded
    if not _warned_unbounded:
        log.warning(
            "noise support is unbounded: the sure forward-invariance screen is skipped "
            "and the full control list is used (truncate the noise to enforce it)"
        )
        _warned_unbounded = True


def apply_constraint_adaptation(
    spec: ConstraintSpec, newly_empty: set, n_particles: int
) -> set:
    """Grow the infeasible set at a sweep boundary.

    Particles whose permissible control set came up empty join the infeasible
    set; the set never shrinks.  Raises AllInfeasibleError when no feasible
    particle remains.
    """
    spec.infeasible |= {int(i) for i in newly_empty}
    if len(spec.infeasible) >= n_particles:
        raise AllInfeasibleError(
            "every particle is infeasible under the chance constraint"
        )
    return spec.infeasible
