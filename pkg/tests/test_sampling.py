"""Particle clouds, control grids, likelihood rows, and the IS estimator."""

import math

import numpy as np
import pytest
from scipy.stats import kstest

import particledp as pdp
from particledp.model import ConfigurationError
from particledp.sampling import NoSupportOverlapError


def uniform_cloud(box, n, seed):
    space = pdp.StateSpace(box=box)
    return pdp.draw_particles(pdp.UniformBoxDensity(box=box), space, n, seed)


# ---------------------------------------------------------------------------
# draw_particles


def test_uniform_cloud_inside_box_with_sane_mean():
    box = np.array([[-10.0, 10.0], [-5.0, 15.0]])
    cloud = uniform_cloud(box, 2000, seed=7)
    assert cloud.n == 2000
    assert np.all(pdp.StateSpace(box=box).contains(cloud.points))
    center = box.mean(axis=1)
    sigma = (box[:, 1] - box[:, 0]) / math.sqrt(12.0)
    bound = 3.0 * sigma / math.sqrt(2000.0)
    assert np.all(np.abs(cloud.points.mean(axis=0) - center) <= bound)


def test_single_particle_cloud():
    box = np.array([[-1.0, 1.0]])
    cloud = uniform_cloud(box, 1, seed=0)
    assert cloud.n == 1
    assert cloud.density[0] == pytest.approx(0.5)


def test_uniform_cloud_passes_ks_band():
    box = np.array([[0.0, 1.0]])
    n = 100_000
    cloud = uniform_cloud(box, n, seed=13)
    stat = kstest(cloud.points[:, 0], "uniform").statistic
    assert stat < 1.628 / math.sqrt(n)  # 99% Kolmogorov band


def test_gaussian_cloud_rejection_sampled_into_box():
    box = np.array([[-3.0, 3.0]])
    space = pdp.StateSpace(box=box)
    density = pdp.GaussianDensity(mean=[0.0], cov=[[4.0]])
    cloud = pdp.draw_particles(density, space, 500, seed=21)
    assert np.all(space.contains(cloud.points))
    assert cloud.n_rejected > 0  # sd=2 on [-3,3] must reject some draws
    # stored densities are the analytic (untruncated) evaluations
    np.testing.assert_allclose(
        cloud.log_density, np.asarray(density.logpdf(cloud.points)), atol=0
    )


def test_seed_determinism_bit_exact():
    box = np.array([[-2.0, 2.0], [-2.0, 2.0]])
    a = uniform_cloud(box, 777, seed=99)
    b = uniform_cloud(box, 777, seed=99)
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.log_density, b.log_density)
    c = uniform_cloud(box, 777, seed=100)
    assert not np.array_equal(a.points, c.points)


def test_uniform_density_must_match_state_box():
    space = pdp.StateSpace(box=[[-1.0, 1.0]])
    with pytest.raises(ConfigurationError):
        pdp.draw_particles(pdp.UniformBoxDensity(box=[[-2.0, 2.0]]), space, 10, seed=0)


def test_cloud_csv_round_trip(tmp_path):
    box = np.array([[-2.0, 2.0], [0.0, 4.0]])
    cloud = uniform_cloud(box, 50, seed=3)
    path = tmp_path / "cloud.csv"
    cloud.to_csv(path, version="0.1.0")
    text = path.read_text()
    assert text.startswith("# particledp 0.1.0 cloud N=50 seed=3 r_x=2")
    back = pdp.ParticleCloud.from_csv(path)
    assert back.seed == 3
    assert np.array_equal(back.points, cloud.points)
    np.testing.assert_allclose(back.density, cloud.density, rtol=0, atol=0)


# ---------------------------------------------------------------------------
# likelihood rows


def test_single_particle_row_is_one():
    cloud = uniform_cloud(np.array([[-1.0, 1.0]]), 1, seed=0)
    row = pdp.likelihood_row(cloud, pdp.GaussianDensity([0.0], [[1.0]]), [0.3])
    np.testing.assert_array_equal(row.values, [1.0])


def test_symmetric_particles_split_mass_evenly():
    cloud = pdp.ParticleCloud(
        points=np.array([[0.5], [1.5]]), log_density=np.log([0.1, 0.1]), seed=0
    )
    row = pdp.likelihood_row(cloud, pdp.GaussianDensity([0.0], [[0.7]]), [1.0])
    np.testing.assert_allclose(row.values, [0.5, 0.5], atol=1e-15)


def test_three_particle_row_matches_hand_normalization():
    # particles {0,1,2}, uniform X on [-5,5], W = N(0, 0.5), predicted mean 1:
    # weights proportional to exp(-d^2) with d in {1, 0, 1} scaled by 1/sqrt(pi)
    cloud = pdp.ParticleCloud(
        points=np.array([[0.0], [1.0], [2.0]]), log_density=np.log([0.1] * 3), seed=0
    )
    row = pdp.likelihood_row(cloud, pdp.GaussianDensity([0.0], [[0.5]]), [1.0])
    e1 = math.exp(-1.0)
    hand = np.array([e1, 1.0, e1]) / (1.0 + 2.0 * e1)
    np.testing.assert_allclose(row.values, hand, rtol=1e-14)
    assert row.values.sum() == pytest.approx(1.0, abs=1e-12)
    # raw mass: sum of W(xi - 1)/X(xi) in linear space
    phi = lambda d: math.exp(-d * d) / math.sqrt(math.pi)
    assert row.raw_mass == pytest.approx((phi(1) + phi(0) + phi(1)) / 0.1, rel=1e-12)


def test_rows_normalize_to_one_on_random_instances():
    rng = np.random.default_rng(4)
    box = np.array([[-4.0, 4.0], [-4.0, 4.0]])
    cloud = uniform_cloud(box, 300, seed=8)
    noise = pdp.GaussianDensity([0.0, 0.0], [[0.5, 0.1], [0.1, 0.4]])
    for _ in range(50):
        mean = rng.uniform(-3, 3, size=2)
        row = pdp.likelihood_row(cloud, noise, mean)
        assert abs(row.values.sum() - 1.0) <= 1e-12
        assert np.all(row.values >= 0.0) and np.all(row.values <= 1.0)


def test_no_support_overlap_error_carries_diagnostics():
    cloud = pdp.ParticleCloud(
        points=np.array([[0.0], [0.5]]), log_density=np.log([0.1, 0.1]), seed=0
    )
    noise = pdp.UniformBoxDensity(box=[[-0.1, 0.1]])
    with pytest.raises(NoSupportOverlapError) as err:
        pdp.likelihood_row(cloud, noise, [3.0])
    assert err.value.nearest_distance == pytest.approx(2.5)
    np.testing.assert_array_equal(err.value.predicted_mean, [3.0])


def test_no_support_overlap_nearest_fallback():
    cloud = pdp.ParticleCloud(
        points=np.array([[0.0], [0.5]]), log_density=np.log([0.1, 0.1]), seed=0
    )
    noise = pdp.UniformBoxDensity(box=[[-0.1, 0.1]])
    row = pdp.likelihood_row(cloud, noise, [3.0], on_no_overlap="nearest")
    np.testing.assert_array_equal(row.values, [0.0, 1.0])


def test_row_survives_linear_space_underflow():
    # all ratios underflow in linear space; log-space normalization still works
    cloud = pdp.ParticleCloud(
        points=np.array([[-40.0], [40.0]]), log_density=np.log([0.0125, 0.0125]), seed=0
    )
    row = pdp.likelihood_row(cloud, pdp.GaussianDensity([0.0], [[1.0]]), [0.5])
    assert row.raw_mass == 0.0  # underflowed
    assert row.log_raw_mass < -700.0 and math.isfinite(row.log_raw_mass)
    assert row.values.sum() == pytest.approx(1.0, abs=1e-12)
    assert row.values[1] > row.values[0]  # mean 0.5 sits closer to +40


# ---------------------------------------------------------------------------
# control grids


def test_finite_list_passes_through():
    grid = pdp.sample_control_grid(pdp.FiniteControls(controls=np.array([-1.0, 0.0, 1.0])))
    assert grid.provenance == "explicit"
    np.testing.assert_array_equal(grid.controls[:, 0], [-1.0, 0.0, 1.0])


def test_box_grid_sampling_inside_box():
    space = pdp.BoxControls(box=[[-3.0, 3.0]], n_samples=50)
    grid = pdp.sample_control_grid(space, seed=3)
    assert grid.n == 50
    assert grid.provenance == "sampled"
    assert np.all((grid.controls >= -3.0) & (grid.controls <= 3.0))
    again = pdp.sample_control_grid(space, seed=3)
    assert np.array_equal(grid.controls, again.controls)


def test_dense_box_grid_has_vanishing_gaps():
    """Empirical max distance to the nearest sample shrinks below 0.01 at 1e4."""
    space = pdp.BoxControls(box=[[-1.0, 1.0]], n_samples=10_000)
    grid = pdp.sample_control_grid(space, seed=5)
    samples = np.sort(grid.controls[:, 0])
    reference = np.linspace(-1.0, 1.0, 4001)
    idx = np.searchsorted(samples, reference)
    idx_lo = np.clip(idx - 1, 0, len(samples) - 1)
    idx_hi = np.clip(idx, 0, len(samples) - 1)
    nearest = np.minimum(
        np.abs(reference - samples[idx_lo]), np.abs(samples[idx_hi] - reference)
    )
    assert nearest.max() < 0.01


def test_gaussian_control_density_sampling():
    space = pdp.BoxControls(
        box=[[-6.0, 6.0]],
        n_samples=50,
        density=pdp.GaussianDensity(mean=[0.0], cov=[[1.0]]),
    )
    grid = pdp.sample_control_grid(space, seed=2)
    assert grid.n == 50
    assert np.all(np.abs(grid.controls) <= 6.0)
    assert np.std(grid.controls) < 2.0  # Gaussian(0,1), not uniform on [-6,6]


# ---------------------------------------------------------------------------
# estimate_expectation


def test_constant_weights_give_exact_constant():
    cloud = uniform_cloud(np.array([[-5.0, 5.0]]), 100, seed=1)
    row = pdp.likelihood_row(cloud, pdp.GaussianDensity([0.0], [[0.5]]), [0.0])
    est = pdp.estimate_expectation(cloud, np.full(100, 5.0), row)
    assert est == 5.0


def test_one_hot_row_picks_single_weight():
    cloud = uniform_cloud(np.array([[-5.0, 5.0]]), 10, seed=2)
    values = np.zeros(10)
    values[4] = 1.0
    row = pdp.LikelihoodRow(values=values, raw_mass=1.0, log_raw_mass=0.0)
    weights = np.arange(10.0)
    assert pdp.estimate_expectation(cloud, weights, row) == 4.0


def test_estimate_stays_in_weight_hull():
    rng = np.random.default_rng(6)
    cloud = uniform_cloud(np.array([[-5.0, 5.0]]), 500, seed=3)
    noise = pdp.GaussianDensity([0.0], [[0.3]])
    for _ in range(30):
        weights = rng.uniform(-20, 20, size=500)
        row = pdp.likelihood_row(cloud, noise, rng.uniform(-4, 4, size=1))
        est = pdp.estimate_expectation(cloud, weights, row)
        assert weights.min() <= est <= weights.max()


def test_quadratic_expectation_close_to_closed_form():
    # E[(m + w)^2] = m^2 + sigma^2 for w ~ N(0, sigma^2)
    m, var = 1.0, 0.25
    box = np.array([[-5.0, 5.0]])
    noise = pdp.GaussianDensity([0.0], [[var]])
    estimates = []
    for seed in range(20):
        cloud = uniform_cloud(box, 100_000, seed=1000 + seed)
        row = pdp.likelihood_row(cloud, noise, [m])
        estimates.append(pdp.estimate_expectation(cloud, cloud.points[:, 0] ** 2, row))
    estimates = np.asarray(estimates)
    truth = m * m + var
    stderr = estimates.std(ddof=1) / math.sqrt(len(estimates))
    assert abs(estimates.mean() - truth) <= 3.0 * stderr + 1e-4


def test_length_mismatch_rejected():
    cloud = uniform_cloud(np.array([[-1.0, 1.0]]), 10, seed=0)
    row = pdp.likelihood_row(cloud, pdp.GaussianDensity([0.0], [[1.0]]), [0.0])
    with pytest.raises(ConfigurationError):
        pdp.estimate_expectation(cloud, np.zeros(9), row)


def test_mixture_cloud_rejection_sampled_into_box():
    box = np.array([[-3.0, 3.0]])
    space = pdp.StateSpace(box=box)
    mix = pdp.MixtureDensity(
        components=[
            pdp.GaussianDensity(mean=[-1.0], cov=[[1.0]]),
            pdp.GaussianDensity(mean=[1.5], cov=[[0.5]]),
        ],
        weights=[0.4, 0.6],
    )
    cloud = pdp.draw_particles(mix, space, 400, seed=23)
    assert np.all(space.contains(cloud.points))
    assert np.all(np.isfinite(cloud.log_density))
    again = pdp.draw_particles(mix, space, 400, seed=23)
    assert np.array_equal(cloud.points, again.points)
