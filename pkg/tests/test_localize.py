"""Tests for Monte Carlo localization"""

import math

import numpy as np
import pytest

from racestack.core import OccupancyGrid, Pose2D
from racestack.errors import NoFreeSpace
from racestack.localize import (
    GaussianInit, LocalizationConfig, Localizer, ParticleSet, UniformFree, effective_sample_size,
    estimate_pose, init_particles, motion_update, resample_and_estimate, sensor_update,
    systematic_resample,
)
from racestack.raycast import ScanConfig, simulate_scan
from racestack.sim import NoiseConfig, OdometryDelta

TRUE_POSE = Pose2D(2.0, 1.2, 0.4)
SCAN = ScanConfig(beam_count=181, range_max=4.0)


def test_uniform_init_lands_on_free_cells(asymmetric_room):
    pset = init_particles(asymmetric_room, 500, UniformFree(), 1)
    assert pset.n == 500
    assert not asymmetric_room.occupied_at(pset.poses[:, 0], pset.poses[:, 1]).any()
    assert pset.weights.sum() == pytest.approx(1.0)


def test_uniform_init_without_free_space():
    grid = OccupancyGrid(np.ones((3, 3)), 0.1)
    with pytest.raises(NoFreeSpace):
        init_particles(grid, 10, UniformFree(), 0)


def test_gaussian_init_with_zero_sigma():
    pset = init_particles(OccupancyGrid(np.zeros((3, 3)), 0.1), 4, GaussianInit(TRUE_POSE), 0)
    assert np.allclose(pset.poses, TRUE_POSE.as_array())


def test_motion_update_in_body_frame():
    pset = ParticleSet(np.array([[0.0, 0.0, math.pi / 2], [1.0, 1.0, 0.0]]),
                       np.array([0.5, 0.5]), np.random.default_rng(0))
    moved = motion_update(pset, OdometryDelta(1.0, 0.0, 0.1, 1.0), NoiseConfig())
    assert moved.poses[0] == pytest.approx([0.0, 1.0, math.pi / 2 + 0.1])
    assert moved.poses[1] == pytest.approx([2.0, 1.0, 0.1])


def test_true_pose_outweighs_offset_pose(asymmetric_room):
    scan = simulate_scan(asymmetric_room, TRUE_POSE, SCAN)
    offset = Pose2D(TRUE_POSE.x + 1.0, TRUE_POSE.y, TRUE_POSE.theta)
    pset = ParticleSet(np.array([TRUE_POSE.as_array(), offset.as_array()]),
                       np.array([0.5, 0.5]), np.random.default_rng(0))
    weighted = sensor_update(pset, scan, asymmetric_room, subsample_k=10)
    assert weighted.weights[0] > weighted.weights[1]
    assert weighted.weights.sum() == pytest.approx(1.0)


def test_parallel_weighting_matches_serial(asymmetric_room):
    scan = simulate_scan(asymmetric_room, TRUE_POSE, SCAN)
    pset = init_particles(asymmetric_room, 300, UniformFree(), 4)
    serial = sensor_update(pset, scan, asymmetric_room, subsample_k=12, workers=1)
    threaded = sensor_update(pset, scan, asymmetric_room, subsample_k=12, workers=3)
    assert np.array_equal(serial.weights, threaded.weights)


def test_degenerate_weights_reset_to_uniform(asymmetric_room):
    scan = simulate_scan(asymmetric_room, TRUE_POSE, SCAN)
    pset = ParticleSet(np.array([TRUE_POSE.as_array()] * 3), np.zeros(3), np.random.default_rng(0))
    weighted = sensor_update(pset, scan, asymmetric_room, subsample_k=10)
    assert weighted.degenerate
    assert weighted.weights == pytest.approx([1 / 3] * 3)


def test_systematic_resample_one_hot():
    idx = systematic_resample(np.array([0.0, 0.0, 1.0, 0.0]), np.random.default_rng(0))
    assert idx.tolist() == [2, 2, 2, 2]


def test_resample_only_when_ess_low():
    rng = np.random.default_rng(0)
    poses = np.zeros((4, 3))
    poses[:, 0] = [0.0, 1.0, 2.0, 3.0]
    even = ParticleSet(poses, np.full(4, 0.25), rng)
    assert effective_sample_size(even.weights) == pytest.approx(4.0)
    kept, estimate = resample_and_estimate(even)
    assert np.array_equal(kept.poses, poses)
    assert estimate.x == pytest.approx(1.5)

    peaked = ParticleSet(poses, np.array([0.97, 0.01, 0.01, 0.01]), rng)
    resampled, _ = resample_and_estimate(peaked)
    assert resampled.weights == pytest.approx([0.25] * 4)


def test_estimate_heading_is_circular_mean():
    poses = np.array([[0.0, 0.0, math.pi - 0.1], [0.0, 0.0, -math.pi + 0.1]])
    pset = ParticleSet(poses, np.array([0.5, 0.5]), np.random.default_rng(0))
    assert abs(estimate_pose(pset).theta) == pytest.approx(math.pi, abs=1e-9)


def test_config_validation():
    with pytest.raises(ValueError):
        LocalizationConfig(particles=0)
    with pytest.raises(ValueError):
        LocalizationConfig(init='somewhere')


@pytest.mark.slow
def test_global_localization_converges(asymmetric_room):
    """Stationary vehicle, uniform start: 30 scans bring the estimate to the true pose"""
    cfg = LocalizationConfig(particles=1000, subsample_k=10, sigma_z=0.1, init='uniform')
    noise = NoiseConfig(odom_pos_sigma=0.02, odom_theta_sigma=0.02)
    scan = simulate_scan(asymmetric_room, TRUE_POSE, SCAN)
    tolerance = 2.0 * asymmetric_room.resolution

    converged = 0
    for seed in range(10):
        localizer = Localizer(asymmetric_room, cfg, noise, np.random.default_rng(seed))
        for _ in range(30):
            estimate = localizer.step(OdometryDelta(0.0, 0.0, 0.0, 0.0), scan)
            if estimate.distance_to(TRUE_POSE) <= tolerance:
                break
        if estimate.distance_to(TRUE_POSE) <= tolerance:
            converged += 1
    assert converged >= 9


def test_resampling_keeps_the_expected_pose():
    rng = np.random.default_rng(3)
    poses = np.zeros((50, 3))
    poses[:, 0] = rng.uniform(0.0, 10.0, size=50)
    poses[:, 1] = rng.uniform(-2.0, 2.0, size=50)
    weights = rng.random(50)
    weights /= weights.sum()
    expected = weights @ poses[:, :2]

    means = [poses[systematic_resample(weights, np.random.default_rng(seed)), :2].mean(axis=0)
             for seed in range(100)]
    assert np.mean(means, axis=0) == pytest.approx(expected, abs=0.1)


def test_motion_update_is_reproducible_for_a_seed():
    poses = np.tile([1.0, 2.0, 0.3], (200, 1))
    noise = NoiseConfig(odom_pos_sigma=0.05, odom_theta_sigma=0.02)
    delta = OdometryDelta(0.5, 0.0, 0.1, 1.0)

    def moved(seed):
        pset = ParticleSet(poses.copy(), np.full(200, 1.0 / 200), np.random.default_rng(seed))
        return motion_update(pset, delta, noise).poses

    assert np.array_equal(moved(11), moved(11))
    assert not np.array_equal(moved(11), moved(12))
