"""Tests for grid ray marching"""

import math

import numpy as np
import pytest

from racestack.core import OccupancyGrid, Pose2D
from racestack.raycast import ScanConfig, cast_ray, cast_rays, resolve_march_step, simulate_scan


def exit_distance(lx, ly, angle, x0, x1, y0, y1):
    """Exact distance from an interior point to the boundary of an axis-aligned box"""
    dx, dy = math.cos(angle), math.sin(angle)
    candidates = []
    if dx > 0:
        candidates.append((x1 - lx) / dx)
    elif dx < 0:
        candidates.append((x0 - lx) / dx)
    if dy > 0:
        candidates.append((y1 - ly) / dy)
    elif dy < 0:
        candidates.append((y0 - ly) / dy)
    return min(candidates)


def test_wall_ahead():
    res = 0.05
    cells = np.zeros((40, 200))
    cells[:, 60:] = 1.0  # x >= 3.0
    grid = OccupancyGrid(cells, res, Pose2D(0.0, -1.0, 0.0))
    assert cast_ray(grid, Pose2D(0.0, 0.0, 0.0), 0.0, 10.0) == pytest.approx(3.0, abs=0.025)


def test_clear_ray_returns_range_max(empty_grid):
    assert cast_ray(empty_grid, Pose2D(0.0, 0.0, 0.0), 0.3, 2.0) == 2.0


def test_origin_inside_obstacle_returns_zero():
    grid = OccupancyGrid(np.ones((4, 4)), 0.1)
    assert cast_ray(grid, Pose2D(0.2, 0.2, 0.0), 1.0, 5.0) == 0.0


def test_leaving_grid_is_a_hit():
    grid = OccupancyGrid(np.zeros((10, 10)), 0.1)
    assert cast_ray(grid, Pose2D(0.5, 0.5, 0.0), 0.0, 5.0) == pytest.approx(0.5, abs=0.025)


def test_march_step_larger_than_half_resolution_rejected():
    grid = OccupancyGrid(np.zeros((4, 4)), 0.1)
    with pytest.raises(ValueError):
        resolve_march_step(grid, 0.06)
    assert resolve_march_step(grid, None) == pytest.approx(0.05)


def test_symmetric_corridor():
    res = 0.05
    cells = np.zeros((41, 200))
    cells[:5, :] = 1.0
    cells[-5:, :] = 1.0
    grid = OccupancyGrid(cells, res, Pose2D(0.0, -41 * res / 2.0, 0.0))
    cfg = ScanConfig(beam_count=181, range_max=8.0)
    scan = simulate_scan(grid, Pose2D(2.0, 0.0, 0.0), cfg)
    step = cfg.step_for(grid)
    assert np.all(np.abs(scan.ranges - scan.ranges[::-1]) < 2.0 * step)


def test_against_exact_box_intersection():
    """Free axis-aligned box in a random grid: the marched range tracks the exact exit"""
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        res = float(rng.choice([0.02, 0.05, 0.1]))
        width = int(rng.integers(12, 60))
        height = int(rng.integers(12, 60))
        c0 = int(rng.integers(1, width // 3))
        c1 = int(rng.integers(2 * width // 3, width))
        r0 = int(rng.integers(1, height // 3))
        r1 = int(rng.integers(2 * height // 3, height))
        cells = np.ones((height, width))
        cells[r0:r1, c0:c1] = 0.0
        origin = Pose2D(rng.uniform(-3, 3), rng.uniform(-3, 3), 0.0)
        grid = OccupancyGrid(cells, res, origin)

        lx = rng.uniform(c0 * res + 1e-3, c1 * res - 1e-3)
        ly = rng.uniform(r0 * res + 1e-3, r1 * res - 1e-3)
        angle = rng.uniform(-math.pi, math.pi)
        range_max = float(rng.uniform(0.2, 6.0))
        step = res / 2.0

        exact = min(exit_distance(lx, ly, angle, c0 * res, c1 * res, r0 * res, r1 * res), range_max)
        marched = cast_ray(grid, Pose2D(origin.x + lx, origin.y + ly, 0.0), angle, range_max)
        assert 0.0 <= marched <= range_max
        worst = max(worst, abs(marched - exact) / step)
    assert worst <= 0.5 + 1e-9


def test_batch_matches_single(box_grid):
    angles = np.linspace(-math.pi, math.pi, 17)
    batch = cast_rays(box_grid, 0.3, -0.2, angles, 5.0)
    single = [cast_ray(box_grid, Pose2D(0.3, -0.2, 0.0), a, 5.0) for a in angles]
    assert np.allclose(batch, single)


def test_scan_config_validation():
    with pytest.raises(ValueError):
        ScanConfig(beam_count=1)
    with pytest.raises(ValueError):
        ScanConfig(angle_min=1.0, angle_max=0.5)
    with pytest.raises(ValueError):
        ScanConfig(range_max=0.0)


@pytest.mark.parametrize('seed', range(5))
def test_more_obstacles_never_lengthen_a_ray(seed):
    rng = np.random.default_rng(seed)
    cells = (rng.random((60, 60)) < 0.03).astype(float)
    base = OccupancyGrid(cells, 0.05, Pose2D(-1.5, -1.5, 0.0))
    denser = base.with_cells(np.maximum(cells, (rng.random(cells.shape) < 0.05).astype(float)))

    xs = rng.uniform(-1.4, 1.4, size=40)
    ys = rng.uniform(-1.4, 1.4, size=40)
    angles = rng.uniform(-math.pi, math.pi, size=40)
    before = cast_rays(base, xs, ys, angles, 4.0)
    after = cast_rays(denser, xs, ys, angles, 4.0)
    assert np.all(after <= before)
