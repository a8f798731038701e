"""Shared fixtures: small reference problems used across the test modules."""

from __future__ import annotations

import logging

import numpy as np
import pytest

import particledp as pdp

logging.getLogger("particledp").setLevel(logging.ERROR)


@pytest.fixture
def hand_instance():
    """Fully hand-computable 3-particle instance.

    Particles {0, 1, 2} on [-3, 3] with uniform sampling density, Gaussian
    noise N(0, 0.5), dynamics f(x, u) = x + u, stage cost x^2 + u^2, terminal
    cost x^2, controls {0, 1}.  With noise variance 0.5 the Gaussian kernel
    becomes exp(-d^2)/sqrt(pi), so every likelihood is an explicit exp().
    """
    box = np.array([[-3.0, 3.0]])
    cloud = pdp.ParticleCloud(
        points=np.array([[0.0], [1.0], [2.0]]),
        log_density=np.log([1.0 / 6.0] * 3),
        seed=0,
    )
    grid = pdp.ControlGrid(controls=np.array([[0.0], [1.0]]), provenance="explicit")
    problem = pdp.ProblemSpec(
        dynamics=pdp.LinearDynamics(F=[[1.0]], B=[[1.0]]),
        cost=pdp.QuadraticCost(Q=[[1.0]], R=[[1.0]]),
        terminal=pdp.QuadraticTerminal(Q_T=[[1.0]]),
        noise=pdp.GaussianDensity([0.0], [[0.5]]),
        sampling=pdp.UniformBoxDensity(box=box),
        state_space=pdp.StateSpace(box=box),
        control_space=pdp.FiniteControls(controls=np.array([[0.0], [1.0]])),
        mode=pdp.FiniteHorizon(T=2),
    )
    return problem, cloud, grid


def make_discounted_problem(
    *,
    alpha: float = 0.9,
    tol: float = 1e-6,
    max_iters: int = 2000,
    cost=None,
    controls=None,
    half_width: float = 3.0,
    noise_var: float = 0.5,
):
    """Scalar discounted problem on [-half_width, half_width]."""
    box = np.array([[-half_width, half_width]])
    ctl = np.array([[-1.0], [0.0], [1.0]]) if controls is None else np.asarray(controls, dtype=float)
    return pdp.ProblemSpec(
        dynamics=pdp.LinearDynamics(F=[[0.9]], B=[[1.0]]),
        cost=cost if cost is not None else pdp.QuadraticCost(Q=[[1.0]], R=[[1.0]]),
        terminal=pdp.ZeroTerminal(),
        noise=pdp.GaussianDensity([0.0], [[noise_var]]),
        sampling=pdp.UniformBoxDensity(box=box),
        state_space=pdp.StateSpace(box=box),
        control_space=pdp.FiniteControls(controls=ctl),
        mode=pdp.InfiniteDiscounted(alpha=alpha, tol=tol, max_iters=max_iters),
    )


@pytest.fixture
def constant_cost_problem():
    """Stage cost identically 1: the discounted fixed point is 1/(1-alpha)."""
    return make_discounted_problem(
        cost=pdp.HookCost(fn=lambda x, u: 1.0, r_x=1, r_u=1), tol=1e-9
    )
