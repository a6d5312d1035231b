"""
Programmatic tracks: map, waypoint files and a ready-to-run scenario JSON
"""

import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .config import config
from .core import OccupancyGrid, Pose2D, WaypointPath, save_map, save_waypoints

logger = logging.getLogger(__name__)

# Stadium oval
OVAL_STRAIGHT = 6.0
OVAL_RADIUS = 2.5
OVAL_WIDTH = 1.5
OVAL_START = (-1.0, -2.5, 0.0)
OVAL_LAP_LINE = [[0.0, -1.5], [0.0, -3.5]]

# Occluded roundabout
ISLAND_RADIUS = 0.8
RING_RADIUS = 1.6
ZONE_INNER = 1.0
ZONE_ENTRY = 2.2
APPROACH_RADIUS = 6.0
APPROACH_ANGLES = (0.0, 2.0 * math.pi / 3.0, 4.0 * math.pi / 3.0)


def _grid_from_mask(occupied: np.ndarray, resolution: float, origin: Pose2D) -> OccupancyGrid:
    return OccupancyGrid(occupied.astype(float), resolution, origin)


def _write_scenario(directory: Path, name: str, document: dict) -> Path:
    path = directory / f"{name}.json"
    path.write_text(json.dumps(document, indent=2) + "\n")
    return path


def oval_centerline_distance(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    half = OVAL_STRAIGHT / 2.0
    ax = np.abs(xs)
    straight = np.abs(np.abs(ys) - OVAL_RADIUS)
    curve = np.abs(np.hypot(ax - half, ys) - OVAL_RADIUS)
    return np.where(ax <= half, straight, curve)


def oval_centerline(spacing: float = 0.1, straight_speed: float = 2.0,
                    curve_speed: float = 1.5) -> WaypointPath:
    """Counter-clockwise loop starting at the bottom-left end of the lower straight"""
    half = OVAL_STRAIGHT / 2.0
    rows: List[List[float]] = []
    for x in np.arange(-half, half, spacing):
        rows.append([x, -OVAL_RADIUS, straight_speed])
    n_arc = int(math.ceil(math.pi * OVAL_RADIUS / spacing))
    for a in np.linspace(-math.pi / 2.0, math.pi / 2.0, n_arc, endpoint=False):
        rows.append([half + OVAL_RADIUS * math.cos(a), OVAL_RADIUS * math.sin(a), curve_speed])
    for x in np.arange(half, -half, -spacing):
        rows.append([x, OVAL_RADIUS, straight_speed])
    for a in np.linspace(math.pi / 2.0, 1.5 * math.pi, n_arc, endpoint=False):
        rows.append([-half + OVAL_RADIUS * math.cos(a), OVAL_RADIUS * math.sin(a), curve_speed])
    return WaypointPath(np.array(rows), closed=True)


def make_oval(directory, resolution: Optional[float] = None, planner: str = 'pursuit',
              duration: float = 60.0) -> Dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    resolution = resolution or config.default_resolution
    origin = Pose2D(-7.0, -4.5)
    width = int(round(14.0 / resolution))
    height = int(round(9.0 / resolution))
    grid = _grid_from_mask(np.zeros((height, width)), resolution, origin)
    xs, ys = grid.cell_centers()
    grid = grid.with_cells((oval_centerline_distance(xs, ys) > OVAL_WIDTH / 2.0).astype(float))

    save_map(grid, directory / 'oval.pgm', directory / 'oval.yaml')
    save_waypoints(oval_centerline(), directory / 'oval_centerline.csv', 'stadium oval, CCW')

    planner_params = {'path': 'oval_centerline.csv', 'closed': True, 'lookahead': 1.0}
    if planner == 'ftg':
        planner_params = {'goal_path': 'oval_centerline.csv', 'closed': True,
                          'lookahead': 1.5, 'gap_threshold': 1.2}
    elif planner in ('lattice', 'rbf'):
        planner_params = {'centerline': 'oval_centerline.csv', 'closed': True,
                          'longitudinal': [1.5, 2.0, 2.5], 'lateral': [-0.3, 0.0, 0.3]}
        if planner == 'rbf':
            planner_params['network'] = 'network.rsrbf'
    scenario = _write_scenario(directory, 'oval', {
        'version': 1,
        'name': 'oval',
        'map': {'metadata': 'oval.yaml'},
        'duration': duration,
        'dt': 0.01,
        'seed': 0,
        'lap_line': OVAL_LAP_LINE,
        'monitors': [{'name': 'on_track', 'kind': 'ON_TRACK', 'severity': 'WARN'}],
        'vehicles': [{
            'id': 1,
            'start': list(OVAL_START),
            'planner': planner,
            'planner_rate': 20.0,
            'planner_params': planner_params,
        }],
    })
    logger.info(f"Oval track written to {directory}")
    return {'map': directory / 'oval.yaml', 'centerline': directory / 'oval_centerline.csv',
            'scenario': scenario}


def make_corridor(directory, resolution: Optional[float] = None, length: float = 16.0,
                  width: float = 2.4) -> Dict[str, Path]:
    """Straight walled corridor with staggered box obstacles, driven by FTG"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    resolution = resolution or config.default_resolution
    origin = Pose2D(-1.0, -width / 2.0 - 0.5)
    cols = int(round((length + 2.0) / resolution))
    rows = int(round((width + 1.0) / resolution))
    grid = _grid_from_mask(np.zeros((rows, cols)), resolution, origin)
    xs, ys = grid.cell_centers()
    occupied = (np.abs(ys) > width / 2.0) | (xs < -0.5) | (xs > length + 0.5)
    for cx, cy in ((4.0, 0.5), (8.0, -0.5), (12.0, 0.5)):
        occupied |= (np.abs(xs - cx) <= 0.3) & (np.abs(ys - cy) <= 0.35)
    grid = grid.with_cells(occupied.astype(float))

    save_map(grid, directory / 'corridor.pgm', directory / 'corridor.yaml')
    goal = WaypointPath(np.array([[0.0, 0.0, 1.5], [length, 0.0, 1.5]]), closed=False)
    save_waypoints(goal, directory / 'corridor_goal.csv', 'corridor axis')
    scenario = _write_scenario(directory, 'corridor', {
        'version': 1,
        'name': 'corridor',
        'map': {'metadata': 'corridor.yaml'},
        'duration': 20.0,
        'dt': 0.01,
        'seed': 0,
        'scan': {'beam_count': 271, 'range_max': 6.0},
        'monitors': [{'name': 'clearance', 'kind': 'MIN_CLEARANCE', 'limit': 0.2,
                      'severity': 'FAILSAFE'}],
        'vehicles': [{
            'id': 1,
            'start': [0.5, 0.0, 0.0],
            'planner': 'ftg',
            'planner_rate': 20.0,
            'planner_params': {'goal_path': 'corridor_goal.csv', 'lookahead': 1.5,
                               'gap_threshold': 1.2, 'speed_nominal': 1.5},
        }],
    })
    logger.info(f"Corridor track written to {directory}")
    return {'map': directory / 'corridor.yaml', 'goal': directory / 'corridor_goal.csv',
            'scenario': scenario}


def roundabout_path(angle: float, spacing: float = 0.05, approach_speed: float = 1.5,
                    ring_speed: float = 1.0, taper: float = 1.5) -> WaypointPath:
    """Radial approach at angle, half a turn counter-clockwise on the ring, radial exit"""
    rows: List[List[float]] = []
    for r in np.arange(APPROACH_RADIUS, RING_RADIUS, -spacing):
        rows.append([r * math.cos(angle), r * math.sin(angle), approach_speed])
    n_ring = int(math.ceil(math.pi * RING_RADIUS / spacing))
    for a in np.linspace(angle, angle + math.pi, n_ring, endpoint=False):
        rows.append([RING_RADIUS * math.cos(a), RING_RADIUS * math.sin(a), ring_speed])
    exit_angle = angle + math.pi
    exit_radii = np.arange(RING_RADIUS, APPROACH_RADIUS + 1e-9, spacing)
    for r in exit_radii:
        remaining = APPROACH_RADIUS - r
        speed = approach_speed * min(1.0, remaining / taper)
        rows.append([r * math.cos(exit_angle), r * math.sin(exit_angle), speed])
    return WaypointPath(np.array(rows), closed=False)


def make_roundabout(directory, resolution: Optional[float] = None, vehicles: int = 3,
                    duration: float = 40.0, loss: float = 0.0) -> Dict[str, Path]:
    """Center island blocking the view across the ring; entry arbitrated over V2V"""
    if not 1 <= vehicles <= len(APPROACH_ANGLES):
        raise ValueError(f"vehicles must be between 1 and {len(APPROACH_ANGLES)}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    resolution = resolution or config.default_resolution
    half = APPROACH_RADIUS + 1.5
    size = int(round(2.0 * half / resolution))
    grid = _grid_from_mask(np.zeros((size, size)), resolution, Pose2D(-half, -half))
    xs, ys = grid.cell_centers()
    occupied = ((np.hypot(xs, ys) < ISLAND_RADIUS)
                | (np.maximum(np.abs(xs), np.abs(ys)) > half - 0.2))
    grid = grid.with_cells(occupied.astype(float))
    save_map(grid, directory / 'roundabout.pgm', directory / 'roundabout.yaml')

    vehicle_docs = []
    paths = {}
    for i, angle in enumerate(APPROACH_ANGLES[:vehicles]):
        vehicle_id = i + 1
        name = f"roundabout_path_{vehicle_id}.csv"
        save_waypoints(roundabout_path(angle), directory / name,
                       f"vehicle {vehicle_id}: approach, ring, exit")
        paths[f"path_{vehicle_id}"] = directory / name
        vehicle_docs.append({
            'id': vehicle_id,
            'start': [APPROACH_RADIUS * math.cos(angle), APPROACH_RADIUS * math.sin(angle),
                      math.remainder(angle + math.pi, 2.0 * math.pi)],
            'planner': 'roundabout',
            'planner_rate': 20.0,
            'planner_params': {'path': name, 'lookahead': 0.6},
        })

    zone = {'center': [0.0, 0.0], 'entry_radius': ZONE_ENTRY, 'inner_radius': ZONE_INNER,
            'capacity': 1}
    scenario = _write_scenario(directory, 'roundabout', {
        'version': 1,
        'name': 'roundabout',
        'map': {'metadata': 'roundabout.yaml'},
        'duration': duration,
        'dt': 0.01,
        'seed': 0,
        'v2v': {'enabled': True, 'transport': 'loopback', 'staleness_window': 0.5,
                'loss': loss, 'zone': zone},
        'monitors': [{'name': 'zone_exclusion', 'kind': 'MUTUAL_EXCLUSION', 'severity': 'WARN'}],
        'vehicles': vehicle_docs,
    })
    logger.info(f"Roundabout with {vehicles} vehicle(s) written to {directory}")
    return {'map': directory / 'roundabout.yaml', 'scenario': scenario, **paths}


TRACKS = {
    'oval': make_oval,
    'corridor': make_corridor,
    'roundabout': make_roundabout,
}
