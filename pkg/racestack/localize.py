"""
Monte Carlo localization in a known occupancy grid

Particles are weighted with the raymarching sensor model: expected ranges come
from cast_rays on the map, observed ranges from the (noisy) simulated scan.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from .core import LaserScan, OccupancyGrid, Pose2D, wrap_angles
from .errors import NoFreeSpace
from .raycast import cast_rays
from .sim import NoiseConfig, OdometryDelta

logger = logging.getLogger(__name__)

DEFAULT_SIGMA_Z = 0.1
DEFAULT_SUBSAMPLE_K = 18

# Particles per raycasting task
_CHUNK = 128


@dataclass(frozen=True)
class UniformFree:
    """Initialize uniformly over free cells with uniform headings"""


@dataclass(frozen=True)
class GaussianInit:
    pose: Pose2D
    sigma: float = 0.0
    sigma_theta: Optional[float] = None  # defaults to sigma

    def __post_init__(self):
        if self.sigma < 0 or (self.sigma_theta is not None and self.sigma_theta < 0):
            raise ValueError("Gaussian init sigmas must be >= 0")


InitMode = Union[UniformFree, GaussianInit]


@dataclass(eq=False)
class ParticleSet:
    poses: np.ndarray  # (n, 3) x, y, theta
    weights: np.ndarray  # (n,)
    rng: np.random.Generator
    degenerate: bool = False

    @property
    def n(self) -> int:
        return int(self.poses.shape[0])

    @property
    def particles(self) -> List[Tuple[Pose2D, float]]:
        return [(Pose2D(*p), float(w)) for p, w in zip(self.poses, self.weights)]


@dataclass(frozen=True)
class LocalizationConfig:
    particles: int = 1000
    subsample_k: int = DEFAULT_SUBSAMPLE_K
    sigma_z: float = DEFAULT_SIGMA_Z
    init: str = 'uniform'  # 'uniform' or 'gaussian'
    init_sigma: float = 0.2
    workers: int = 1

    def __post_init__(self):
        errors = []
        if self.particles < 1:
            errors.append("particles must be >= 1")
        if self.subsample_k < 1:
            errors.append("subsample_k must be >= 1")
        if not self.sigma_z > 0:
            errors.append("sigma_z must be > 0")
        if self.init not in ('uniform', 'gaussian'):
            errors.append(f"init must be 'uniform' or 'gaussian', got {self.init!r}")
        if self.workers < 1:
            errors.append("workers must be >= 1")
        if errors:
            raise ValueError("; ".join(errors))


def init_particles(grid: OccupancyGrid, n: int, mode: InitMode,
                   rng: Union[np.random.Generator, int, None] = None) -> ParticleSet:
    if n < 1:
        raise ValueError(f"Particle count must be >= 1, got {n}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng

    if isinstance(mode, GaussianInit):
        base = mode.pose.as_array()
        poses = np.tile(base, (n, 1))
        sigma_theta = mode.sigma if mode.sigma_theta is None else mode.sigma_theta
        if mode.sigma > 0:
            poses[:, :2] += rng.normal(0.0, mode.sigma, size=(n, 2))
        if sigma_theta > 0:
            poses[:, 2] = wrap_angles(poses[:, 2] + rng.normal(0.0, sigma_theta, size=n))
    else:
        rows, cols = np.nonzero(~grid.occupied)
        if rows.size == 0:
            raise NoFreeSpace("Map has no free cells to place particles in")
        pick = rng.integers(0, rows.size, size=n)
        # Offsets stay off the cell edges so each particle maps back to its cell
        offsets = np.clip(rng.random((n, 2)), 1e-3, 1.0 - 1e-3)
        lx = (cols[pick] + offsets[:, 0]) * grid.resolution
        ly = (rows[pick] + offsets[:, 1]) * grid.resolution
        c = math.cos(grid.origin.theta)
        s = math.sin(grid.origin.theta)
        poses = np.empty((n, 3))
        poses[:, 0] = grid.origin.x + c * lx - s * ly
        poses[:, 1] = grid.origin.y + s * lx + c * ly
        poses[:, 2] = rng.uniform(-math.pi, math.pi, size=n)

    return ParticleSet(poses, np.full(n, 1.0 / n), rng)


def motion_update(pset: ParticleSet, delta: OdometryDelta, noise: NoiseConfig) -> ParticleSet:
    """Apply a body-frame odometry delta to every particle, plus per-particle noise"""
    n = pset.n
    dx = np.full(n, float(delta[0]))
    dy = np.full(n, float(delta[1]))
    dtheta = np.full(n, float(delta[2]))
    if noise.odom_pos_sigma > 0:
        dx += pset.rng.normal(0.0, noise.odom_pos_sigma, size=n)
        dy += pset.rng.normal(0.0, noise.odom_pos_sigma, size=n)
    if noise.odom_theta_sigma > 0:
        dtheta += pset.rng.normal(0.0, noise.odom_theta_sigma, size=n)

    theta = pset.poses[:, 2]
    c = np.cos(theta)
    s = np.sin(theta)
    poses = np.empty_like(pset.poses)
    poses[:, 0] = pset.poses[:, 0] + c * dx - s * dy
    poses[:, 1] = pset.poses[:, 1] + s * dx + c * dy
    poses[:, 2] = wrap_angles(theta + dtheta)
    return replace(pset, poses=poses, weights=pset.weights.copy())


def _chunk_log_likelihood(grid: OccupancyGrid, poses: np.ndarray, angles: np.ndarray,
                          observed: np.ndarray, range_max: float, sigma_z: float,
                          march_step: Optional[float]) -> np.ndarray:
    expected = cast_rays(grid, poses[:, 0:1], poses[:, 1:2], poses[:, 2:3] + angles[None, :],
                         range_max, march_step)
    err = observed[None, :] - expected
    return -np.sum(err * err, axis=1) / (2.0 * sigma_z * sigma_z)


def sensor_update(pset: ParticleSet, scan: LaserScan, grid: OccupancyGrid, subsample_k: int,
                  sigma_z: float = DEFAULT_SIGMA_Z, workers: int = 1,
                  march_step: Optional[float] = None) -> ParticleSet:
    """Reweight particles by the Gaussian beam likelihood of every k-th beam"""
    if subsample_k < 1:
        raise ValueError(f"subsample_k must be >= 1, got {subsample_k}")
    beams = np.arange(0, scan.beam_count, subsample_k)
    angles = scan.angles[beams]
    observed = scan.ranges[beams]

    chunks = [pset.poses[i:i + _CHUNK] for i in range(0, pset.n, _CHUNK)]

    def weigh(chunk):
        return _chunk_log_likelihood(grid, chunk, angles, observed, scan.range_max, sigma_z,
                                     march_step)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            # map() yields in submission order, keeping the reduction index-ordered
            parts = list(executor.map(weigh, chunks))
    else:
        parts = [weigh(chunk) for chunk in chunks]
    log_lik = np.concatenate(parts)

    with np.errstate(divide='ignore'):
        log_w = np.log(pset.weights) + log_lik
    finite = np.isfinite(log_w)
    if not finite.any():
        logger.warning(f"⚠️ Degenerate particle weights ({pset.n} particles); resetting to uniform")
        return replace(pset, weights=np.full(pset.n, 1.0 / pset.n), degenerate=True)

    log_w = np.where(finite, log_w, -np.inf)
    weights = np.exp(log_w - logsumexp(log_w))
    weights /= weights.sum()
    return replace(pset, weights=weights, degenerate=False)


def effective_sample_size(weights: np.ndarray) -> float:
    return float(1.0 / np.sum(np.square(weights)))


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions)


def estimate_pose(pset: ParticleSet) -> Pose2D:
    """Weighted mean position and circular weighted mean heading"""
    w = pset.weights
    x = float(np.dot(w, pset.poses[:, 0]))
    y = float(np.dot(w, pset.poses[:, 1]))
    theta = math.atan2(float(np.dot(w, np.sin(pset.poses[:, 2]))),
                       float(np.dot(w, np.cos(pset.poses[:, 2]))))
    return Pose2D(x, y, theta)


def resample_and_estimate(pset: ParticleSet) -> Tuple[ParticleSet, Pose2D]:
    estimate = estimate_pose(pset)
    if effective_sample_size(pset.weights) < pset.n / 2.0:
        indexes = systematic_resample(pset.weights, pset.rng)
        pset = replace(pset, poses=pset.poses[indexes].copy(),
                       weights=np.full(pset.n, 1.0 / pset.n))
    return pset, estimate


class Localizer:
    """Per-vehicle particle filter driven by odometry and scans"""

    def __init__(self, grid: OccupancyGrid, cfg: LocalizationConfig, noise: NoiseConfig,
                 rng: np.random.Generator, start_pose: Optional[Pose2D] = None):
        self.grid = grid
        self.cfg = cfg
        self.noise = noise
        if cfg.init == 'gaussian' and start_pose is not None:
            mode: InitMode = GaussianInit(start_pose, cfg.init_sigma)
        else:
            mode = UniformFree()
        self.particles = init_particles(grid, cfg.particles, mode, rng)
        self.estimate = estimate_pose(self.particles)

    def step(self, delta: OdometryDelta, scan: Optional[LaserScan]) -> Pose2D:
        self.particles = motion_update(self.particles, delta, self.noise)
        if scan is not None:
            self.particles = sensor_update(self.particles, scan, self.grid, self.cfg.subsample_k,
                                           self.cfg.sigma_z, self.cfg.workers)
            self.particles, self.estimate = resample_and_estimate(self.particles)
        else:
            self.estimate = estimate_pose(self.particles)
        return self.estimate
