"""
Follow-The-Gap reactive planner

Builds the gap array from a scan, picks the widest gap, and fuses the heading to
its center with a goal heading, weighted by how close the nearest obstacle is.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .core import ControlCommand, LaserScan
from .errors import EmptyGapList

logger = logging.getLogger(__name__)

MIN_OBSTACLE_DISTANCE = 0.05


@dataclass(frozen=True)
class Gap:
    start_idx: int
    end_idx: int  # inclusive
    center_angle: float
    angular_width: float


@dataclass(frozen=True)
class FtgConfig:
    gap_threshold: float = 1.5
    alpha: float = 4.0
    beta: float = 1.0
    speed_nominal: float = 2.0
    d_stop: float = 0.3
    d_slow: float = 1.5  # d_min at or above which speed_nominal applies
    steering_gain: float = 2.0

    def __post_init__(self):
        errors = []
        if not self.gap_threshold > 0:
            errors.append("gap_threshold must be > 0")
        if self.alpha < 0 or self.beta < 0 or not self.alpha + self.beta > 0:
            errors.append("alpha and beta must be >= 0 with alpha + beta > 0")
        if self.speed_nominal < 0:
            errors.append("speed_nominal must be >= 0")
        if self.d_stop < 0 or not self.d_slow > self.d_stop:
            errors.append("need 0 <= d_stop < d_slow")
        if errors:
            raise ValueError("; ".join(errors))


def _make_gap(scan: LaserScan, start: int, end: int) -> Gap:
    return Gap(start, end, scan.beam_angle((start + end) // 2),
               (end - start + 1) * scan.angle_increment)


def build_gap_array(scan: LaserScan, cfg: FtgConfig) -> List[Gap]:
    """Maximal runs of beams with range above the gap threshold, in index order"""
    free = (scan.ranges > cfg.gap_threshold).astype(np.int8)
    edges = np.diff(np.concatenate(([0], free, [0])))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return [_make_gap(scan, int(s), int(e)) for s, e in zip(starts, ends)]


def find_max_gap(gaps: Sequence[Gap]) -> Gap:
    """Widest gap; ties go to the most head-on, then the lowest start index"""
    if not gaps:
        raise EmptyGapList("No gaps to choose from")
    return min(gaps, key=lambda g: (-g.angular_width, abs(g.center_angle), g.start_idx))


def gap_center_heading(gap: Gap, scan: LaserScan) -> float:
    return scan.beam_angle((gap.start_idx + gap.end_idx) // 2)


def fuse_headings(theta_gap: float, theta_goal: float, d_min: float, cfg: FtgConfig) -> float:
    if cfg.beta == 0.0:
        return theta_gap
    if cfg.alpha == 0.0:
        return theta_goal
    d_min = max(d_min, MIN_OBSTACLE_DISTANCE)
    gap_weight = cfg.alpha / d_min
    return (gap_weight * theta_gap + cfg.beta * theta_goal) / (gap_weight + cfg.beta)


def ftg_command(scan: LaserScan, goal_angle: float, cfg: FtgConfig,
                kappa_max: float = float('inf')) -> ControlCommand:
    gaps = build_gap_array(scan, cfg)
    if not gaps:
        logger.debug("FTG: no gap above threshold, stopping")
        return ControlCommand.stop()

    theta_gap = gap_center_heading(find_max_gap(gaps), scan)
    d_min = float(scan.ranges.min())
    theta = fuse_headings(theta_gap, goal_angle, d_min, cfg)
    kappa = float(np.clip(theta * cfg.steering_gain, -kappa_max, kappa_max))

    scale = (max(d_min, MIN_OBSTACLE_DISTANCE) - cfg.d_stop) / (cfg.d_slow - cfg.d_stop)
    speed = cfg.speed_nominal * float(np.clip(scale, 0.0, 1.0))
    return ControlCommand(speed, kappa)
