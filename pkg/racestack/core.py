"""
Core domain types shared by every racestack module
Poses, vehicle state, occupancy grids, laser scans, waypoint paths and commands,
plus the coordinate transforms and map/waypoint file I/O built on them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from .errors import BadThreshold, DimensionMismatch, MalformedHeader, MapLoadError, OutOfBounds

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

PathLike = Union[str, Path]


def wrap_angle(angle: float) -> float:
    """Normalize an angle to (-pi, pi]"""
    if -math.pi < angle <= math.pi:
        return angle
    wrapped = math.fmod(angle + math.pi, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    wrapped -= math.pi
    if wrapped <= -math.pi:
        wrapped = math.pi
    return wrapped


def wrap_angles(angles: np.ndarray) -> np.ndarray:
    """Vectorized wrap_angle"""
    angles = np.asarray(angles, dtype=float)
    wrapped = np.mod(angles + math.pi, TWO_PI) - math.pi
    wrapped = np.where(wrapped <= -math.pi, math.pi, wrapped)
    in_range = (angles > -math.pi) & (angles <= math.pi)
    return np.where(in_range, angles, wrapped)


def angle_diff(a: float, b: float) -> float:
    """Wrapped difference a - b"""
    return wrap_angle(a - b)


@dataclass(frozen=True)
class Pose2D:
    x: float = 0.0  # meters
    y: float = 0.0  # meters
    theta: float = 0.0  # radians, (-pi, pi]

    def __post_init__(self) -> None:
        object.__setattr__(self, 'x', float(self.x))
        object.__setattr__(self, 'y', float(self.y))
        object.__setattr__(self, 'theta', wrap_angle(float(self.theta)))

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "Pose2D":
        if len(values) != 3:
            raise ValueError(f"Pose needs exactly 3 values (x, y, theta), got {len(values)}")
        return cls(float(values[0]), float(values[1]), float(values[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def distance_to(self, other: "Pose2D") -> float:
        return math.hypot(other.x - self.x, other.y - self.y)


def compose_pose(base: Pose2D, local: Pose2D) -> Pose2D:
    """Express a pose given in `base`'s frame in the world frame"""
    c = math.cos(base.theta)
    s = math.sin(base.theta)
    return Pose2D(
        base.x + c * local.x - s * local.y,
        base.y + s * local.x + c * local.y,
        wrap_angle(base.theta + local.theta),
    )


# Inverse of to_local_frame
from_local_frame = compose_pose


def to_local_frame(frame: Pose2D, point: Pose2D) -> Pose2D:
    """Express a world pose in the coordinate frame attached to `frame`"""
    c = math.cos(frame.theta)
    s = math.sin(frame.theta)
    dx = point.x - frame.x
    dy = point.y - frame.y
    return Pose2D(
        c * dx + s * dy,
        -s * dx + c * dy,
        wrap_angle(point.theta - frame.theta),
    )


@dataclass(frozen=True)
class VehicleState:
    pose: Pose2D
    v: float = 0.0  # m/s
    kappa: float = 0.0  # 1/m

    def __post_init__(self) -> None:
        if not self.v >= 0.0:
            raise ValueError(f"Vehicle speed must be >= 0, got {self.v}")
        object.__setattr__(self, 'v', float(self.v))
        object.__setattr__(self, 'kappa', float(self.kappa))

    def with_pose(self, pose: Pose2D) -> "VehicleState":
        return replace(self, pose=pose)


@dataclass(frozen=True)
class ControlCommand:
    speed: float = 0.0  # m/s setpoint
    kappa: float = 0.0  # 1/m commanded curvature

    def __post_init__(self) -> None:
        if not self.speed >= 0.0:
            raise ValueError(f"Commanded speed must be >= 0, got {self.speed}")
        object.__setattr__(self, 'speed', float(self.speed))
        object.__setattr__(self, 'kappa', float(self.kappa))

    def clamped(self, kappa_max: float, v_max: float) -> "ControlCommand":
        return ControlCommand(
            speed=min(max(self.speed, 0.0), v_max),
            kappa=min(max(self.kappa, -kappa_max), kappa_max),
        )

    @classmethod
    def stop(cls, kappa: float = 0.0) -> "ControlCommand":
        return cls(speed=0.0, kappa=kappa)


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """2D occupancy map; cells[row, col] with row 0 at the origin side"""

    cells: np.ndarray
    resolution: float  # meters/cell
    origin: Pose2D = Pose2D()
    occupied_threshold: float = 0.65

    def __post_init__(self) -> None:
        cells = np.array(self.cells, dtype=float)
        if cells.ndim != 2 or cells.shape[0] < 1 or cells.shape[1] < 1:
            raise ValueError(f"Grid cells must be a non-empty 2D array, got shape {cells.shape}")
        if not self.resolution > 0:
            raise ValueError(f"Grid resolution must be > 0, got {self.resolution}")
        if not (0.0 < self.occupied_threshold < 1.0):
            raise BadThreshold(f"occupied_threshold must lie in (0, 1), got {self.occupied_threshold}")
        if np.any(cells < 0.0) or np.any(cells > 1.0) or not np.all(np.isfinite(cells)):
            raise ValueError("Grid cell values must lie in [0, 1]")
        cells.setflags(write=False)
        object.__setattr__(self, 'cells', cells)
        object.__setattr__(self, 'resolution', float(self.resolution))

    @property
    def width(self) -> int:
        return int(self.cells.shape[1])

    @property
    def height(self) -> int:
        return int(self.cells.shape[0])

    @cached_property
    def occupied(self) -> np.ndarray:
        mask = self.cells >= self.occupied_threshold
        mask.setflags(write=False)
        return mask

    @cached_property
    def clearance(self) -> np.ndarray:
        """Distance in meters from each cell center to the nearest occupied cell center

        Space outside the grid counts as occupied.
        """
        free = np.where(self.occupied, 0, 255).astype(np.uint8)
        padded = cv2.copyMakeBorder(free, 1, 1, 1, 1, cv2.BORDER_CONSTANT, value=0)
        dist = cv2.distanceTransform(padded, cv2.DIST_L2, cv2.DIST_MASK_PRECISE)
        result = dist[1:-1, 1:-1].astype(float) * self.resolution
        result.setflags(write=False)
        return result

    def with_cells(self, cells: np.ndarray) -> "OccupancyGrid":
        return OccupancyGrid(cells, self.resolution, self.origin, self.occupied_threshold)

    def local_cell_coords(self, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Continuous (col, row) coordinates of world points"""
        dx = np.asarray(xs, dtype=float) - self.origin.x
        dy = np.asarray(ys, dtype=float) - self.origin.y
        if self.origin.theta == 0.0:
            return dx / self.resolution, dy / self.resolution
        c = math.cos(self.origin.theta)
        s = math.sin(self.origin.theta)
        return (c * dx + s * dy) / self.resolution, (-s * dx + c * dy) / self.resolution

    def cell_indices(self, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Integer (cols, rows) of world points and a mask of points inside the grid"""
        fc, fr = self.local_cell_coords(xs, ys)
        cols = np.floor(fc).astype(np.int64)
        rows = np.floor(fr).astype(np.int64)
        inside = (cols >= 0) & (cols < self.width) & (rows >= 0) & (rows < self.height)
        return cols, rows, inside

    def occupied_at(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Occupancy of world points; anything outside the grid counts as occupied"""
        cols, rows, inside = self.cell_indices(xs, ys)
        result = np.ones(np.shape(cols), dtype=bool)
        result[inside] = self.occupied[rows[inside], cols[inside]]
        return result

    def clearance_at(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Clearance (meters, cell-center based) at world points; 0 outside the grid"""
        cols, rows, inside = self.cell_indices(xs, ys)
        result = np.zeros(np.shape(cols), dtype=float)
        result[inside] = self.clearance[rows[inside], cols[inside]]
        return result

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """World coordinates of every cell center, each shaped (height, width)"""
        cols, rows = np.meshgrid(np.arange(self.width), np.arange(self.height))
        lx = (cols + 0.5) * self.resolution
        ly = (rows + 0.5) * self.resolution
        c = math.cos(self.origin.theta)
        s = math.sin(self.origin.theta)
        return self.origin.x + c * lx - s * ly, self.origin.y + s * lx + c * ly


def world_to_grid(grid: OccupancyGrid, x: float, y: float) -> Tuple[int, int]:
    """Cell (col, row) containing a world point"""
    fc, fr = grid.local_cell_coords(np.array(x), np.array(y))
    col = int(math.floor(float(fc)))
    row = int(math.floor(float(fr)))
    if not (0 <= col < grid.width and 0 <= row < grid.height):
        raise OutOfBounds(x, y)
    return col, row


def grid_to_world(grid: OccupancyGrid, col: int, row: int) -> Tuple[float, float]:
    """World coordinates of a cell center"""
    lx = (col + 0.5) * grid.resolution
    ly = (row + 0.5) * grid.resolution
    c = math.cos(grid.origin.theta)
    s = math.sin(grid.origin.theta)
    return grid.origin.x + c * lx - s * ly, grid.origin.y + s * lx + c * ly


@dataclass(frozen=True, eq=False)
class LaserScan:
    angle_min: float  # radians, vehicle frame
    angle_max: float
    beam_count: int
    range_max: float  # meters
    ranges: np.ndarray

    def __post_init__(self) -> None:
        if self.beam_count < 2:
            raise ValueError(f"beam_count must be >= 2, got {self.beam_count}")
        if not self.angle_min < self.angle_max:
            raise ValueError("angle_min must be smaller than angle_max")
        ranges = np.array(self.ranges, dtype=float)
        if ranges.shape != (self.beam_count,):
            raise ValueError(f"Expected {self.beam_count} ranges, got shape {ranges.shape}")
        if np.any(ranges < 0.0) or np.any(ranges > self.range_max):
            raise ValueError(f"Ranges must lie in [0, {self.range_max}]")
        ranges.setflags(write=False)
        object.__setattr__(self, 'ranges', ranges)

    @property
    def angle_increment(self) -> float:
        return (self.angle_max - self.angle_min) / (self.beam_count - 1)

    @property
    def angles(self) -> np.ndarray:
        """Vehicle-frame angle of every beam"""
        return self.angle_min + np.arange(self.beam_count) * self.angle_increment

    def beam_angle(self, index: int) -> float:
        return self.angle_min + index * self.angle_increment


@dataclass(frozen=True, eq=False)
class WaypointPath:
    """Ordered (x, y, speed) waypoints; closed paths are traversed cyclically"""

    points: np.ndarray
    closed: bool = False

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"Waypoints must be an (N, 3) array of x, y, speed; got {points.shape}")
        if points.shape[0] < 2:
            raise ValueError("A waypoint path needs at least 2 points")
        if not np.all(np.isfinite(points)):
            raise ValueError("Waypoints must be finite")
        if np.any(points[:, 2] < 0.0):
            raise ValueError("Waypoint speeds must be >= 0")
        points.setflags(write=False)
        object.__setattr__(self, 'points', points)

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def speeds(self) -> np.ndarray:
        return self.points[:, 2]

    @property
    def segment_count(self) -> int:
        return len(self.points) if self.closed else len(self.points) - 1

    def segment(self, index: int) -> Tuple[np.ndarray, np.ndarray, float, float]:
        """Start point, end point and endpoint speeds of segment `index`"""
        n = len(self.points)
        i = index % self.segment_count
        j = (i + 1) % n
        return self.points[i, :2], self.points[j, :2], float(self.points[i, 2]), float(self.points[j, 2])

    @cached_property
    def _segment_arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        starts = self.points[:, :2]
        ends = np.roll(starts, -1, axis=0)
        if not self.closed:
            starts = starts[:-1]
            ends = ends[:-1]
        lengths = np.hypot(ends[:, 0] - starts[:, 0], ends[:, 1] - starts[:, 1])
        return starts, ends, lengths

    @cached_property
    def arc_lengths(self) -> np.ndarray:
        """Cumulative arc length at the start of every segment, plus the total"""
        _, _, lengths = self._segment_arrays
        return np.concatenate(([0.0], np.cumsum(lengths)))

    @property
    def length(self) -> float:
        return float(self.arc_lengths[-1])

    def segment_distances(self, x: float, y: float) -> Tuple[np.ndarray, np.ndarray]:
        """Distance from a point to every segment and the clamped projection parameter"""
        starts, ends, lengths = self._segment_arrays
        d = ends - starts
        sq = lengths ** 2
        rel = np.array([x, y]) - starts
        with np.errstate(invalid='ignore', divide='ignore'):
            t = np.where(sq > 0.0, (rel[:, 0] * d[:, 0] + rel[:, 1] * d[:, 1]) / sq, 0.0)
        t = np.clip(t, 0.0, 1.0)
        px = starts[:, 0] + t * d[:, 0]
        py = starts[:, 1] + t * d[:, 1]
        return np.hypot(px - x, py - y), t

    def project(self, x: float, y: float) -> Tuple[float, int, float, float]:
        """Closest point on the polyline: (arc, segment index, t, distance)"""
        dist, t = self.segment_distances(x, y)
        idx = int(np.argmin(dist))
        _, _, lengths = self._segment_arrays
        arc = float(self.arc_lengths[idx] + t[idx] * lengths[idx])
        return arc, idx, float(t[idx]), float(dist[idx])

    def sample(self, arc: float) -> Tuple[float, float, float, float]:
        """(x, y, heading, speed) at an arc position; wraps when closed, clamps when open"""
        total = self.length
        if self.closed and total > 0.0:
            arc = arc % total
        else:
            arc = min(max(arc, 0.0), total)
        starts, ends, lengths = self._segment_arrays
        idx = int(np.searchsorted(self.arc_lengths, arc, side='right') - 1)
        idx = min(max(idx, 0), len(lengths) - 1)
        # Skip zero-length segments so the heading stays defined
        while lengths[idx] == 0.0 and idx < len(lengths) - 1:
            idx += 1
        seg_len = lengths[idx]
        t = 0.0 if seg_len == 0.0 else min(max((arc - self.arc_lengths[idx]) / seg_len, 0.0), 1.0)
        p0, p1 = starts[idx], ends[idx]
        _, _, s0, s1 = self.segment(idx)
        heading = math.atan2(p1[1] - p0[1], p1[0] - p0[0])
        return (float(p0[0] + t * (p1[0] - p0[0])), float(p0[1] + t * (p1[1] - p0[1])),
                heading, s0 + t * (s1 - s0))


# ---------------------------------------------------------------------------
# Map files: binary PGM (P5, 8-bit) + flat key:value metadata
# ---------------------------------------------------------------------------

def _parse_pgm(data: bytes) -> np.ndarray:
    """Decode a P5 PGM into a (height, width) uint8 array in image row order"""
    tokens: List[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise MalformedHeader("PGM header ended before magic/width/height/maxval were read")
        if data[pos:pos + 1] == b'#':
            newline = data.find(b'\n', pos)
            if newline < 0:
                raise MalformedHeader("PGM header comment is not terminated")
            pos = newline + 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b'#':
            pos += 1
        tokens.append(data[start:pos])

    if tokens[0] != b'P5':
        raise MalformedHeader(f"Expected binary PGM magic 'P5', got {tokens[0][:8]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise MalformedHeader(f"Non-numeric PGM header fields: {tokens[1:4]!r}")
    if width <= 0 or height <= 0:
        raise MalformedHeader(f"PGM dimensions must be positive, got {width}x{height}")
    if maxval != 255:
        raise MalformedHeader(f"Only 8-bit PGM (maxval 255) is supported, got maxval {maxval}")
    if pos >= n or not data[pos:pos + 1].isspace():
        raise MalformedHeader("PGM header must end with a single whitespace character")

    pixels = data[pos + 1:]
    if len(pixels) != width * height:
        raise DimensionMismatch(
            f"PGM declares {width}x{height} = {width * height} pixels but carries {len(pixels)} bytes")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)


def _parse_metadata(text: str) -> dict:
    meta = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if ':' not in line:
            raise MalformedHeader(f"Metadata line {lineno} is not 'key: value': {raw!r}")
        key, value = line.split(':', 1)
        meta[key.strip()] = value.strip()
    return meta


def _parse_origin(value: str) -> Pose2D:
    parts = [p for p in value.strip().strip('[]()').replace(',', ' ').split() if p]
    try:
        return Pose2D.from_sequence([float(p) for p in parts])
    except ValueError as e:
        raise MalformedHeader(f"Bad origin {value!r}: {e}")


def load_map(pgm_path: PathLike, meta_path: PathLike) -> OccupancyGrid:
    """Load a PGM image and its metadata into an OccupancyGrid"""
    try:
        data = Path(pgm_path).read_bytes()
        meta = _parse_metadata(Path(meta_path).read_text())
    except OSError as e:
        raise MapLoadError(f"Cannot read map files: {e}") from e

    missing = [key for key in ('resolution', 'origin', 'occupied_thresh') if key not in meta]
    if missing:
        raise MalformedHeader(f"Map metadata is missing {', '.join(missing)}")

    try:
        resolution = float(meta['resolution'])
        threshold = float(meta['occupied_thresh'])
    except ValueError as e:
        raise MalformedHeader(f"Bad numeric value in map metadata: {e}")
    if not resolution > 0:
        raise MalformedHeader(f"resolution must be > 0, got {resolution}")
    if not (0.0 < threshold < 1.0):
        raise BadThreshold(f"occupied_thresh must lie in (0, 1), got {threshold}")

    negate_raw = meta.get('negate', '0').strip().lower()
    if negate_raw in ('0', 'false'):
        negate = False
    elif negate_raw in ('1', 'true'):
        negate = True
    else:
        raise MalformedHeader(f"negate must be 0 or 1, got {meta['negate']!r}")

    origin = _parse_origin(meta['origin'])
    pixels = _parse_pgm(data)

    for key, actual in (('width', pixels.shape[1]), ('height', pixels.shape[0])):
        if key not in meta:
            continue
        try:
            declared = int(meta[key])
        except ValueError:
            raise MalformedHeader(f"Metadata {key} must be an integer, got {meta[key]!r}")
        if declared != actual:
            raise DimensionMismatch(f"Metadata {key}={meta[key]} but image has {actual}")

    # Image row 0 is the top edge; grid row 0 sits at the origin
    pixels = np.flipud(pixels).astype(float)
    cells = pixels / 255.0 if negate else (255.0 - pixels) / 255.0

    grid = OccupancyGrid(cells, resolution, origin, threshold)
    logger.debug(f"Loaded map {pgm_path}: {grid.width}x{grid.height} @ {resolution} m/cell")
    return grid


def map_image_path(meta_path: PathLike) -> Path:
    """Image named by the metadata 'image' key, else the .pgm sibling of the metadata file"""
    meta_path = Path(meta_path)
    try:
        image = _parse_metadata(meta_path.read_text()).get('image')
    except OSError as e:
        raise MapLoadError(f"Cannot read map metadata: {e}") from e
    if image:
        return meta_path.parent / image
    return meta_path.with_suffix('.pgm')


def load_map_from_metadata(meta_path: PathLike) -> OccupancyGrid:
    return load_map(map_image_path(meta_path), meta_path)


def save_map(grid: OccupancyGrid, pgm_path: PathLike, meta_path: PathLike) -> None:
    """Write a grid as P5 PGM (negate=0) plus metadata; load_map reads it back"""
    pixels = np.rint(255.0 - grid.cells * 255.0).astype(np.uint8)
    ok = cv2.imwrite(str(pgm_path), np.ascontiguousarray(np.flipud(pixels)),
                     [cv2.IMWRITE_PXM_BINARY, 1])
    if not ok:
        raise OSError(f"Could not write map image {pgm_path}")
    o = grid.origin
    Path(meta_path).write_text(
        f"image: {Path(pgm_path).name}\n"
        f"resolution: {float(grid.resolution)!r}\n"
        f"origin: [{float(o.x)!r}, {float(o.y)!r}, {float(o.theta)!r}]\n"
        f"occupied_thresh: {float(grid.occupied_threshold)!r}\n"
        f"free_thresh: 0.196\n"
        f"negate: 0\n"
    )


# ---------------------------------------------------------------------------
# Waypoint CSV: x,y,speed with '#' comments
# ---------------------------------------------------------------------------

def load_waypoints(csv_path: PathLike, closed: bool = False) -> WaypointPath:
    rows = []
    for lineno, raw in enumerate(Path(csv_path).read_text().splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(',')]
        if not rows and [p.lower() for p in parts] == ['x', 'y', 'speed']:
            continue
        if len(parts) != 3:
            raise ValueError(f"{csv_path}:{lineno}: expected 'x,y,speed', got {raw!r}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ValueError(f"{csv_path}:{lineno}: non-numeric waypoint {raw!r}")
    return WaypointPath(np.array(rows, dtype=float).reshape(-1, 3), closed=closed)


def save_waypoints(path: WaypointPath, csv_path: PathLike, comment: Optional[str] = None) -> None:
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append("# x,y,speed")
    for x, y, speed in path.points.tolist():
        lines.append(f"{x!r},{y!r},{speed!r}")
    Path(csv_path).write_text("\n".join(lines) + "\n")


def waypoints_from_xy(xy: Iterable[Sequence[float]], speed: float, closed: bool = False) -> WaypointPath:
    pts = np.array([[p[0], p[1], speed] for p in xy], dtype=float)
    return WaypointPath(pts, closed=closed)
