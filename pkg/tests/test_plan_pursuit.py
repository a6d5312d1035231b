"""Tests for pure-pursuit tracking"""

import math

import numpy as np
import pytest

from racestack.core import ControlCommand, OccupancyGrid, Pose2D, VehicleState, WaypointPath
from racestack.errors import DegenerateGoal, EmptyPath
from racestack.plan_pursuit import (
    PurePursuitTracker, PursuitConfig, find_lookahead_point, pursuit_command,
)
from racestack.sim import VehicleParams, make_world, step_world

SQUARE = WaypointPath(np.array([[0, 0, 1], [4, 0, 1], [4, 4, 1], [0, 4, 1]], dtype=float),
                      closed=True)


def circle_path(radius, speed, spacing=0.05):
    n = int(2 * math.pi * radius / spacing)
    a = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
    return WaypointPath(np.column_stack([radius * np.cos(a), radius * np.sin(a),
                                         np.full(n, speed)]), closed=True)


def test_lookahead_on_next_edge():
    point = find_lookahead_point(SQUARE, Pose2D(2.0, 0.0, 0.0), 3.0)
    assert point.segment == 1
    assert (point.x, point.y) == pytest.approx((4.0, math.sqrt(5.0)))


def test_lookahead_on_current_edge():
    point = find_lookahead_point(SQUARE, Pose2D(1.0, 0.2, 0.0), 1.0)
    assert point.segment == 0
    assert point.x == pytest.approx(1.0 + math.sqrt(1.0 - 0.04))


def test_end_of_open_path_falls_back_to_closest_point():
    line = WaypointPath(np.array([[0, 0, 1], [2, 0, 1]], dtype=float))
    point = find_lookahead_point(line, Pose2D(1.8, 0.1, 0.0), 1.0)
    assert (point.x, point.y) == pytest.approx((1.8, 0.0))


def test_empty_path():
    with pytest.raises(EmptyPath):
        find_lookahead_point(None, Pose2D(), 1.0)


def test_pursuit_curvature():
    cmd = pursuit_command(Pose2D(0.0, 0.0, 0.0), (1.0, 1.0), 1.5, PursuitConfig())
    assert cmd.speed == 1.5
    assert cmd.kappa == pytest.approx(1.0)
    clamped = pursuit_command(Pose2D(), (0.1, 0.1), 1.0, PursuitConfig(), kappa_max=2.0)
    assert clamped.kappa == 2.0


def test_degenerate_goal():
    with pytest.raises(DegenerateGoal):
        pursuit_command(Pose2D(1.0, 1.0, 0.0), (1.0, 1.0), 1.0, PursuitConfig())


def test_tracker_speed_sources():
    tracker = PurePursuitTracker(SQUARE, PursuitConfig(lookahead=1.0, default_speed=0.7,
                                                       use_path_speed=False))
    assert tracker.command(Pose2D(1.0, 0.0, 0.0)).speed == 0.7
    assert tracker.command(Pose2D(1.0, 0.0, 0.0), speed_override=0.0).speed == 0.0
    assert tracker.cursor == 0


def test_closed_loop_circle_curvature():
    """Lookahead 1 m on a 3 m circle settles on curvature 1/R"""
    radius = 3.0
    params = VehicleParams()
    tracker = PurePursuitTracker(circle_path(radius, 1.5), PursuitConfig(lookahead=1.0),
                                 params.kappa_max)
    grid = OccupancyGrid(np.zeros((200, 200)), 0.05, Pose2D(-5.0, -5.0, 0.0))
    world = make_world(grid, [(1, VehicleState(Pose2D(radius, 0.0, math.pi / 2)), params)])

    kappas = []
    cmd = ControlCommand()
    for step in range(1000):
        if step % 5 == 0:
            cmd = tracker.command(world.state(1).pose).clamped(params.kappa_max, params.v_max)
            kappas.append(cmd.kappa)
        world, events = step_world(world, {1: cmd}, 0.01)
        assert not events

    steady = np.array(kappas[-40:])
    assert np.all(np.abs(steady - 1.0 / radius) * radius < 0.05)
