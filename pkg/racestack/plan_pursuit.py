"""
Pure-pursuit path tracking over waypoint paths
"""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .core import ControlCommand, Pose2D, WaypointPath, to_local_frame
from .errors import DegenerateGoal, EmptyPath

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PursuitConfig:
    lookahead: float = 1.0
    default_speed: float = 2.0
    use_path_speed: bool = True

    def __post_init__(self):
        if not self.lookahead > 0:
            raise ValueError(f"lookahead must be > 0, got {self.lookahead}")
        if self.default_speed < 0:
            raise ValueError(f"default_speed must be >= 0, got {self.default_speed}")


class LookaheadPoint(NamedTuple):
    x: float
    y: float
    speed: float
    segment: int  # segment the point lies on; the next warm-start index


def _circle_roots(p0: np.ndarray, p1: np.ndarray, center: np.ndarray, radius: float):
    d = p1 - p0
    f = p0 - center
    a = float(d @ d)
    if a == 0.0:
        return ()
    b = 2.0 * float(f @ d)
    c = float(f @ f) - radius * radius
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return ()
    root = math.sqrt(disc)
    return ((-b - root) / (2.0 * a), (-b + root) / (2.0 * a))


def find_lookahead_point(path: Optional[WaypointPath], pose: Pose2D, lookahead: float,
                         start_index: int = 0) -> LookaheadPoint:
    """First circle/path intersection ahead of the closest segment

    Falls back to the closest path point when the circle never meets the path
    ahead of the vehicle.
    """
    if path is None or len(path.points) == 0:
        raise EmptyPath("Cannot pursue an empty path")

    n_seg = path.segment_count
    dist, t_proj = path.segment_distances(pose.x, pose.y)
    # Cyclic order from the warm-start index so ties resolve toward it
    order = (np.arange(n_seg) + start_index % n_seg) % n_seg
    closest = int(order[np.argmin(dist[order])])

    center = np.array([pose.x, pose.y])
    count = n_seg if path.closed else n_seg - closest
    for k in range(count):
        idx = (closest + k) % n_seg
        p0, p1, s0, s1 = path.segment(idx)
        lower = t_proj[closest] if k == 0 else 0.0
        valid = [t for t in _circle_roots(p0, p1, center, lookahead) if lower <= t <= 1.0]
        if valid:
            t = min(valid)
            point = p0 + t * (p1 - p0)
            return LookaheadPoint(float(point[0]), float(point[1]), s0 + t * (s1 - s0), idx)

    p0, p1, s0, s1 = path.segment(closest)
    t = float(t_proj[closest])
    point = p0 + t * (p1 - p0)
    return LookaheadPoint(float(point[0]), float(point[1]), s0 + t * (s1 - s0), closest)


def pursuit_command(pose: Pose2D, point, speed: float, cfg: PursuitConfig,
                    kappa_max: float = float('inf')) -> ControlCommand:
    """Curvature 2*y/d^2 toward a world-frame point"""
    local = to_local_frame(pose, Pose2D(point[0], point[1], 0.0))
    d_sq = local.x * local.x + local.y * local.y
    if math.sqrt(d_sq) < 1e-6:
        raise DegenerateGoal("Pursuit point coincides with the vehicle position")
    kappa = 2.0 * local.y / d_sq
    kappa = min(max(kappa, -kappa_max), kappa_max)
    return ControlCommand(max(speed, 0.0), kappa)


class PurePursuitTracker:
    """Pure pursuit with a warm-start cursor; one tracker per vehicle"""

    def __init__(self, path: WaypointPath, cfg: PursuitConfig, kappa_max: float = float('inf')):
        self.path = path
        self.cfg = cfg
        self.kappa_max = kappa_max
        self.cursor = 0
        self.last_point: Optional[LookaheadPoint] = None

    def command(self, pose: Pose2D, speed_override: Optional[float] = None) -> ControlCommand:
        point = find_lookahead_point(self.path, pose, self.cfg.lookahead, self.cursor)
        self.cursor = point.segment
        self.last_point = point
        if speed_override is not None:
            speed = speed_override
        elif self.cfg.use_path_speed:
            speed = point.speed
        else:
            speed = self.cfg.default_speed
        try:
            return pursuit_command(pose, point, speed, self.cfg, self.kappa_max)
        except DegenerateGoal:
            logger.warning("Pursuit point on top of the vehicle; holding straight")
            return ControlCommand(max(speed, 0.0), 0.0)
