"""
Grid ray marching for simulated LIDAR and the particle-filter sensor model
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import LaserScan, OccupancyGrid, Pose2D

logger = logging.getLogger(__name__)

# Upper bound on ray samples evaluated per chunk
_SAMPLES_PER_CHUNK = 2_000_000


@dataclass(frozen=True)
class ScanConfig:
    """Scan geometry; defaults follow a 270 degree, 1081 beam, 10 m class scanner"""

    angle_min: float = -0.75 * math.pi
    angle_max: float = 0.75 * math.pi
    beam_count: int = 1081
    range_max: float = 10.0
    march_step: Optional[float] = None  # None means resolution/2

    def __post_init__(self):
        if self.beam_count < 2:
            raise ValueError(f"beam_count must be >= 2, got {self.beam_count}")
        if not self.angle_min < self.angle_max:
            raise ValueError("angle_min must be smaller than angle_max")
        if not self.range_max > 0:
            raise ValueError(f"range_max must be > 0, got {self.range_max}")
        if self.march_step is not None and not self.march_step > 0:
            raise ValueError(f"march_step must be > 0, got {self.march_step}")

    @property
    def angle_increment(self) -> float:
        return (self.angle_max - self.angle_min) / (self.beam_count - 1)

    @property
    def angles(self) -> np.ndarray:
        return self.angle_min + np.arange(self.beam_count) * self.angle_increment

    def step_for(self, grid: OccupancyGrid) -> float:
        return resolve_march_step(grid, self.march_step)


def resolve_march_step(grid: OccupancyGrid, march_step: Optional[float]) -> float:
    limit = grid.resolution / 2.0
    if march_step is None:
        return limit
    if march_step > limit * (1.0 + 1e-12):
        raise ValueError(f"march_step {march_step} exceeds half the grid resolution ({limit})")
    return float(march_step)


def _sample_distances(range_max: float, step: float) -> np.ndarray:
    n = int(math.ceil(range_max / step))
    dists = np.arange(n + 1) * step
    dists = dists[dists < range_max]
    return np.append(dists, range_max)


def cast_rays(grid: OccupancyGrid, xs, ys, angles, range_max: float,
              march_step: Optional[float] = None) -> np.ndarray:
    """Batch form of cast_ray; origins and world angles broadcast against each other"""
    step = resolve_march_step(grid, march_step)
    xs, ys, angles = np.broadcast_arrays(
        np.asarray(xs, dtype=float), np.asarray(ys, dtype=float), np.asarray(angles, dtype=float))
    shape = angles.shape
    xs = xs.ravel()
    ys = ys.ravel()
    angles = angles.ravel()

    dists = _sample_distances(float(range_max), step)
    out = np.empty(angles.size, dtype=float)
    chunk = max(1, _SAMPLES_PER_CHUNK // len(dists))

    for start in range(0, angles.size, chunk):
        sl = slice(start, start + chunk)
        cos_a = np.cos(angles[sl])
        sin_a = np.sin(angles[sl])
        ox = xs[sl]
        oy = ys[sl]

        hits = grid.occupied_at(ox[:, None] + cos_a[:, None] * dists[None, :],
                                oy[:, None] + sin_a[:, None] * dists[None, :])
        ranges = np.full(len(ox), float(range_max))

        blocked = hits[:, 0]
        found = hits.any(axis=1) & ~blocked
        if np.any(found):
            first = np.argmax(hits[found], axis=1)
            lo = dists[first - 1]
            hi = dists[first]
            # One bisection of the bracketing interval, then take its midpoint
            mid = 0.5 * (lo + hi)
            mid_hit = grid.occupied_at(ox[found] + cos_a[found] * mid,
                                       oy[found] + sin_a[found] * mid)
            lo = np.where(mid_hit, lo, mid)
            hi = np.where(mid_hit, mid, hi)
            ranges[found] = 0.5 * (lo + hi)
        ranges[blocked] = 0.0
        out[sl] = ranges

    return out.reshape(shape)


def cast_ray(grid: OccupancyGrid, origin: Pose2D, angle: float, range_max: float,
             march_step: Optional[float] = None) -> float:
    """Distance along a world-frame ray to the first occupied cell

    Returns range_max on a clear ray and 0 when the origin cell is occupied.
    Leaving the grid counts as a hit at the boundary.
    """
    return float(cast_rays(grid, origin.x, origin.y, angle, range_max, march_step))


def simulate_scan(grid: OccupancyGrid, pose: Pose2D, cfg: ScanConfig) -> LaserScan:
    ranges = cast_rays(grid, pose.x, pose.y, pose.theta + cfg.angles, cfg.range_max,
                       cfg.step_for(grid))
    return LaserScan(cfg.angle_min, cfg.angle_max, cfg.beam_count, cfg.range_max, ranges)
