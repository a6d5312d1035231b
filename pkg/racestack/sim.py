"""
Deterministic multi-vehicle simulator

Curvature-kinematic vehicles with actuation limits, LIDAR sensing with optional
noise, noisy odometry and freeze-and-report collision detection.
"""

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from shapely.geometry import Polygon

from .core import (
    ControlCommand,
    LaserScan,
    OccupancyGrid,
    Pose2D,
    VehicleState,
    to_local_frame,
    wrap_angle,
)
from .errors import NonPositiveDt, UnknownVehicleId
from .raycast import ScanConfig, simulate_scan

logger = logging.getLogger(__name__)

DEFAULT_DT = 0.01


@dataclass(frozen=True)
class VehicleParams:
    """1/10-scale defaults; none of these are measured values"""

    wheelbase: float = 0.325
    kappa_max: float = 2.0
    kappa_rate_max: float = 4.0
    accel_max: float = 3.0
    decel_max: float = 5.0
    v_max: float = 7.0
    footprint: Tuple[float, float] = (0.5, 0.3)  # length, width

    def __post_init__(self):
        object.__setattr__(self, 'footprint', tuple(float(v) for v in self.footprint))
        values = {
            'wheelbase': self.wheelbase,
            'kappa_max': self.kappa_max,
            'kappa_rate_max': self.kappa_rate_max,
            'accel_max': self.accel_max,
            'decel_max': self.decel_max,
            'v_max': self.v_max,
            'footprint.length': self.footprint[0],
            'footprint.width': self.footprint[1],
        }
        bad = [name for name, value in values.items() if not value > 0]
        if len(self.footprint) != 2:
            bad.append('footprint')
        if bad:
            raise ValueError(f"Vehicle parameters must be strictly positive: {', '.join(bad)}")

    @property
    def length(self) -> float:
        return self.footprint[0]

    @property
    def width(self) -> float:
        return self.footprint[1]


@dataclass(frozen=True)
class NoiseConfig:
    range_sigma: float = 0.0
    odom_pos_sigma: float = 0.0
    odom_theta_sigma: float = 0.0
    odom_v_sigma: float = 0.0

    def __post_init__(self):
        for name in ('range_sigma', 'odom_pos_sigma', 'odom_theta_sigma', 'odom_v_sigma'):
            if not getattr(self, name) >= 0.0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class VehicleEntry:
    id: int
    state: VehicleState
    params: VehicleParams = VehicleParams()


@dataclass(frozen=True)
class CollisionEvent:
    time: float
    vehicle_ids: Tuple[int, ...]
    kind: str  # 'wall' or 'vehicle'


@dataclass(frozen=True, eq=False)
class World:
    grid: OccupancyGrid
    vehicles: Tuple[VehicleEntry, ...]
    time: float = 0.0
    rng_seed: int = 0
    frozen: FrozenSet[int] = frozenset()
    last_commands: Mapping[int, ControlCommand] = field(default_factory=dict)

    def __post_init__(self):
        vehicles = tuple(sorted(self.vehicles, key=lambda e: e.id))
        ids = [e.id for e in vehicles]
        if len(set(ids)) != len(ids):
            raise ValueError(f"Vehicle ids must be unique, got {ids}")
        object.__setattr__(self, 'vehicles', vehicles)
        object.__setattr__(self, 'frozen', frozenset(self.frozen))
        object.__setattr__(self, 'last_commands', dict(self.last_commands))

    @property
    def ids(self) -> List[int]:
        return [e.id for e in self.vehicles]

    def entry(self, vehicle_id: int) -> VehicleEntry:
        for e in self.vehicles:
            if e.id == vehicle_id:
                return e
        raise UnknownVehicleId(vehicle_id)

    def state(self, vehicle_id: int) -> VehicleState:
        return self.entry(vehicle_id).state


class OdometryDelta(NamedTuple):
    dx: float
    dy: float
    dtheta: float
    v: float


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def _rk4_pose(x: float, y: float, theta: float, v: float, kappa: float, dt: float):
    def deriv(th):
        return v * math.cos(th), v * math.sin(th), v * kappa

    k1 = deriv(theta)
    k2 = deriv(theta + 0.5 * dt * k1[2])
    k3 = deriv(theta + 0.5 * dt * k2[2])
    k4 = deriv(theta + dt * k3[2])
    x += dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
    y += dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
    theta += dt / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
    return x, y, theta


def step_vehicle(state: VehicleState, params: VehicleParams, cmd: ControlCommand,
                 dt: float) -> VehicleState:
    """Advance one vehicle by dt under actuation limits"""
    if not dt > 0:
        raise NonPositiveDt(f"dt must be > 0, got {dt}")

    max_dk = params.kappa_rate_max * dt
    kappa = state.kappa + min(max(cmd.kappa - state.kappa, -max_dk), max_dk)
    kappa = min(max(kappa, -params.kappa_max), params.kappa_max)

    dv = cmd.speed - state.v
    v = state.v + min(max(dv, -params.decel_max * dt), params.accel_max * dt)
    v = min(max(v, 0.0), params.v_max)

    if v == 0.0:
        return VehicleState(state.pose, 0.0, kappa)
    p = state.pose
    x, y, theta = _rk4_pose(p.x, p.y, p.theta, v, kappa, dt)
    return VehicleState(Pose2D(x, y, wrap_angle(theta)), v, kappa)


# ---------------------------------------------------------------------------
# Footprints and collisions
# ---------------------------------------------------------------------------

def footprint_corners(pose: Pose2D, params: VehicleParams) -> np.ndarray:
    """World corners (4, 2) of the footprint rectangle centered on the pose"""
    hl = params.length / 2.0
    hw = params.width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    c = math.cos(pose.theta)
    s = math.sin(pose.theta)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([pose.x, pose.y])


def footprint_polygon(pose: Pose2D, params: VehicleParams) -> Polygon:
    return Polygon(footprint_corners(pose, params))


def _cell_polygon(grid: OccupancyGrid, col: int, row: int) -> Polygon:
    res = grid.resolution
    local = np.array([[col, row], [col + 1, row], [col + 1, row + 1], [col, row + 1]]) * res
    o = grid.origin
    c = math.cos(o.theta)
    s = math.sin(o.theta)
    world = local @ np.array([[c, -s], [s, c]]).T + np.array([o.x, o.y])
    return Polygon(world)


def footprint_hits_map(grid: OccupancyGrid, pose: Pose2D, params: VehicleParams) -> bool:
    """True when the footprint interior overlaps an occupied cell or leaves the grid"""
    corners = footprint_corners(pose, params)
    fc, fr = grid.local_cell_coords(corners[:, 0], corners[:, 1])
    if fc.min() < 0.0 or fr.min() < 0.0 or fc.max() > grid.width or fr.max() > grid.height:
        return True

    c0 = int(math.floor(fc.min()))
    c1 = min(int(math.ceil(fc.max())), grid.width)
    r0 = int(math.floor(fr.min()))
    r1 = min(int(math.ceil(fr.max())), grid.height)
    window = grid.occupied[r0:r1, c0:c1]
    if not window.any():
        return False

    footprint = Polygon(corners)
    for dr, dc in zip(*np.nonzero(window)):
        cell = _cell_polygon(grid, c0 + int(dc), r0 + int(dr))
        if footprint.intersects(cell) and not footprint.touches(cell):
            return True
    return False


def footprints_overlap(a: Polygon, b: Polygon) -> bool:
    return a.intersects(b) and not a.touches(b)


def step_world(world: World, commands: Mapping[int, ControlCommand],
               dt: float) -> Tuple[World, List[CollisionEvent]]:
    """Step every vehicle in ascending id order, then detect and freeze collisions"""
    if not dt > 0:
        raise NonPositiveDt(f"dt must be > 0, got {dt}")
    known = set(world.ids)
    for vehicle_id in commands:
        if vehicle_id not in known:
            raise UnknownVehicleId(vehicle_id)

    held = dict(world.last_commands)
    held.update(commands)
    time = world.time + dt

    stepped = []
    for entry in world.vehicles:
        if entry.id in world.frozen:
            stepped.append(entry)
            continue
        cmd = held.get(entry.id, ControlCommand())
        stepped.append(replace(entry, state=step_vehicle(entry.state, entry.params, cmd, dt)))

    events: List[CollisionEvent] = []
    newly_frozen = set()
    for entry in stepped:
        if entry.id in world.frozen:
            continue
        if footprint_hits_map(world.grid, entry.state.pose, entry.params):
            events.append(CollisionEvent(time, (entry.id,), 'wall'))
            newly_frozen.add(entry.id)

    polygons = [footprint_polygon(e.state.pose, e.params) for e in stepped]
    for i in range(len(stepped)):
        for j in range(i + 1, len(stepped)):
            a, b = stepped[i], stepped[j]
            if a.id in world.frozen and b.id in world.frozen:
                continue
            if footprints_overlap(polygons[i], polygons[j]):
                events.append(CollisionEvent(time, (a.id, b.id), 'vehicle'))
                newly_frozen.update(
                    vid for vid in (a.id, b.id) if vid not in world.frozen)

    if newly_frozen:
        stepped = [
            replace(e, state=replace(e.state, v=0.0)) if e.id in newly_frozen else e
            for e in stepped
        ]
        for event in events:
            logger.info(f"💥 Collision at t={event.time:.2f}s: {event.kind} {event.vehicle_ids}")

    new_world = World(
        grid=world.grid,
        vehicles=tuple(stepped),
        time=time,
        rng_seed=world.rng_seed,
        frozen=world.frozen | newly_frozen,
        last_commands=held,
    )
    return new_world, events


# ---------------------------------------------------------------------------
# Sensing
# ---------------------------------------------------------------------------

def rasterize_vehicles(grid: OccupancyGrid, entries: Iterable[VehicleEntry]) -> OccupancyGrid:
    """Mark every cell whose center lies inside a vehicle footprint as occupied"""
    entries = list(entries)
    if not entries:
        return grid
    cells = np.array(grid.cells)
    xs, ys = grid.cell_centers()
    for entry in entries:
        corners = footprint_corners(entry.state.pose, entry.params)
        fc, fr = grid.local_cell_coords(corners[:, 0], corners[:, 1])
        c0 = max(int(math.floor(fc.min())), 0)
        c1 = min(int(math.ceil(fc.max())) + 1, grid.width)
        r0 = max(int(math.floor(fr.min())), 0)
        r1 = min(int(math.ceil(fr.max())) + 1, grid.height)
        if c0 >= c1 or r0 >= r1:
            continue
        p = entry.state.pose
        dx = xs[r0:r1, c0:c1] - p.x
        dy = ys[r0:r1, c0:c1] - p.y
        c = math.cos(p.theta)
        s = math.sin(p.theta)
        inside = ((np.abs(c * dx + s * dy) <= entry.params.length / 2.0)
                  & (np.abs(-s * dx + c * dy) <= entry.params.width / 2.0))
        cells[r0:r1, c0:c1][inside] = 1.0
    return grid.with_cells(cells)


def sense(world: World, vehicle_id: int, cfg: ScanConfig, noise: NoiseConfig,
          rng: np.random.Generator) -> LaserScan:
    """Scan from one vehicle; the other vehicles show up as obstacles"""
    ego = world.entry(vehicle_id)
    others = [e for e in world.vehicles if e.id != vehicle_id]
    grid = rasterize_vehicles(world.grid, others)
    scan = simulate_scan(grid, ego.state.pose, cfg)
    if noise.range_sigma > 0.0:
        noisy = scan.ranges + rng.normal(0.0, noise.range_sigma, size=scan.beam_count)
        scan = LaserScan(scan.angle_min, scan.angle_max, scan.beam_count, scan.range_max,
                         np.clip(noisy, 0.0, scan.range_max))
    return scan


def odometry(prev_state: VehicleState, new_state: VehicleState, noise: NoiseConfig,
             rng: np.random.Generator) -> OdometryDelta:
    """Body-frame motion between two states, with Gaussian noise per NoiseConfig"""
    delta = to_local_frame(prev_state.pose, new_state.pose)
    dx, dy, dtheta, v = delta.x, delta.y, delta.theta, new_state.v
    if noise.odom_pos_sigma > 0.0:
        ex, ey = rng.normal(0.0, noise.odom_pos_sigma, size=2)
        dx += float(ex)
        dy += float(ey)
    if noise.odom_theta_sigma > 0.0:
        dtheta = wrap_angle(dtheta + float(rng.normal(0.0, noise.odom_theta_sigma)))
    if noise.odom_v_sigma > 0.0:
        v = max(0.0, v + float(rng.normal(0.0, noise.odom_v_sigma)))
    return OdometryDelta(dx, dy, dtheta, v)


# ---------------------------------------------------------------------------
# Episode log
# ---------------------------------------------------------------------------

EPISODE_COLUMNS = ['time', 'id', 'x', 'y', 'theta', 'v', 'kappa',
                   'cmd_speed', 'cmd_kappa', 'collision_flag']
ESTIMATE_COLUMNS = ['est_x', 'est_y', 'est_theta']


def _fmt(value: float) -> str:
    return f"{value:.6f}"


class EpisodeLog:
    """CSV episode writer: one row per step per vehicle"""

    def __init__(self, path, with_estimates: bool = False):
        self.path = Path(path)
        self.with_estimates = with_estimates
        self._file = None
        self._writer = None

    def open(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, 'w', newline='')
        self._writer = csv.writer(self._file, lineterminator='\n')
        columns = EPISODE_COLUMNS + (ESTIMATE_COLUMNS if self.with_estimates else [])
        self._writer.writerow(columns)
        return self

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None
            self._writer = None

    def __enter__(self):
        return self.open()

    def __exit__(self, exc_type, exc, tb):
        self.close()

    def write_step(self, world: World, commands: Mapping[int, ControlCommand],
                   collided: Iterable[int] = (),
                   estimates: Optional[Mapping[int, Pose2D]] = None) -> None:
        if self._writer is None:
            raise RuntimeError("EpisodeLog is not open")
        collided = set(collided)
        for entry in world.vehicles:
            s = entry.state
            cmd = commands.get(entry.id) or world.last_commands.get(entry.id) or ControlCommand()
            row = [_fmt(world.time), entry.id, _fmt(s.pose.x), _fmt(s.pose.y), _fmt(s.pose.theta),
                   _fmt(s.v), _fmt(s.kappa), _fmt(cmd.speed), _fmt(cmd.kappa),
                   1 if entry.id in collided else 0]
            if self.with_estimates:
                est = (estimates or {}).get(entry.id)
                row += [_fmt(est.x), _fmt(est.y), _fmt(est.theta)] if est else ['', '', '']
            self._writer.writerow(row)


def read_episode_log(path) -> Dict[int, Dict[str, np.ndarray]]:
    """Per-vehicle column arrays from an episode CSV"""
    rows: Dict[int, List[Sequence[str]]] = {}
    with open(path, newline='') as f:
        reader = csv.DictReader(f)
        for row in reader:
            rows.setdefault(int(row['id']), []).append(row)
    result = {}
    for vehicle_id in sorted(rows):
        data = rows[vehicle_id]
        result[vehicle_id] = {
            'time': np.array([float(r['time']) for r in data]),
            'x': np.array([float(r['x']) for r in data]),
            'y': np.array([float(r['y']) for r in data]),
            'theta': np.array([float(r['theta']) for r in data]),
            'v': np.array([float(r['v']) for r in data]),
            'collision_flag': np.array([int(r['collision_flag']) for r in data]),
        }
    return result


def make_world(grid: OccupancyGrid, vehicles: Sequence[Tuple[int, VehicleState, VehicleParams]],
               rng_seed: int = 0) -> World:
    return World(grid, tuple(VehicleEntry(i, s, p) for i, s, p in vehicles), 0.0, rng_seed)
