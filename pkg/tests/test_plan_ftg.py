"""Tests for the Follow-The-Gap planner"""

import math

import numpy as np
import pytest

from racestack.core import ControlCommand, LaserScan
from racestack.errors import EmptyGapList
from racestack.plan_ftg import (
    FtgConfig, Gap, build_gap_array, find_max_gap, ftg_command, fuse_headings,
)


def make_scan(ranges, range_max=10.0):
    ranges = np.asarray(ranges, dtype=float)
    return LaserScan(-0.75 * math.pi, 0.75 * math.pi, len(ranges), range_max, ranges)


def brute_force_gaps(ranges, threshold):
    """Every maximal run of above-threshold beams, found by extending from each start"""
    runs = []
    n = len(ranges)
    i = 0
    while i < n:
        if ranges[i] > threshold:
            j = i
            while j + 1 < n and ranges[j + 1] > threshold:
                j += 1
            runs.append((i, j))
            i = j + 1
        else:
            i += 1
    return runs


def test_matches_brute_force_on_random_scans():
    rng = np.random.default_rng(99)
    cfg = FtgConfig(gap_threshold=1.5)
    for _ in range(1000):
        n = int(rng.integers(2, 120))
        ranges = rng.choice([0.2, 1.0, 1.5, 2.0, 8.0], size=n) * rng.uniform(0.8, 1.2, size=n)
        ranges = np.clip(ranges, 0.0, 10.0)
        scan = make_scan(ranges)
        gaps = build_gap_array(scan, cfg)
        assert [(g.start_idx, g.end_idx) for g in gaps] == brute_force_gaps(ranges, 1.5)


def test_gap_cover():
    rng = np.random.default_rng(5)
    cfg = FtgConfig(gap_threshold=1.0)
    ranges = rng.uniform(0.0, 3.0, size=200)
    gaps = build_gap_array(make_scan(ranges), cfg)
    covered = np.zeros(200, dtype=int)
    for g in gaps:
        covered[g.start_idx:g.end_idx + 1] += 1
    assert np.array_equal(covered, (ranges > 1.0).astype(int))


def test_turns_away_from_obstacle_on_the_right():
    ranges = np.full(181, 5.0)
    ranges[:90] = 0.8  # negative angles are to the right
    cmd = ftg_command(make_scan(ranges), 0.0, FtgConfig())
    assert cmd.kappa > 0.0
    assert cmd.speed > 0.0


def test_all_blocked_stops():
    cmd = ftg_command(make_scan(np.full(50, 0.4)), 0.3, FtgConfig())
    assert cmd == ControlCommand.stop()


def test_clear_scan_follows_goal():
    cfg = FtgConfig()
    cmd = ftg_command(make_scan(np.full(181, 10.0)), 0.2, cfg)
    # Gap center is straight ahead; the goal pulls the fused heading positive
    assert cmd.kappa > 0.0
    assert cmd.speed == pytest.approx(cfg.speed_nominal)


def test_speed_scales_with_nearest_obstacle():
    cfg = FtgConfig(speed_nominal=2.0, d_stop=0.3, d_slow=1.5)
    ranges = np.full(181, 6.0)
    ranges[0] = 0.9
    cmd = ftg_command(make_scan(ranges), 0.0, cfg)
    assert cmd.speed == pytest.approx(2.0 * (0.9 - 0.3) / 1.2)
    ranges[0] = 0.2
    assert ftg_command(make_scan(ranges), 0.0, cfg).speed == 0.0


def test_max_gap_tie_break():
    gaps = [Gap(0, 9, -0.5, 0.2), Gap(20, 29, 0.1, 0.2), Gap(40, 44, 0.0, 0.1)]
    assert find_max_gap(gaps).start_idx == 20
    with pytest.raises(EmptyGapList):
        find_max_gap([])


def test_fuse_headings_extremes():
    assert fuse_headings(0.4, -0.2, 1.0, FtgConfig(beta=0.0)) == 0.4
    assert fuse_headings(0.4, -0.2, 1.0, FtgConfig(alpha=0.0)) == -0.2
    fused = fuse_headings(0.4, -0.2, 1.0, FtgConfig(alpha=1.0, beta=1.0))
    assert fused == pytest.approx(0.1)


def test_config_validation():
    with pytest.raises(ValueError):
        FtgConfig(alpha=0.0, beta=0.0)
    with pytest.raises(ValueError):
        FtgConfig(d_stop=2.0, d_slow=1.0)
