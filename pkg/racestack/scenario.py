"""
Scenario documents

A scenario is one JSON file describing the map, the vehicles with their
planners, sensing and noise, monitors, V2V settings and run length. Loading
turns it into frozen dataclasses; every problem is reported with its field
path and raised together as one ConfigError.
"""

import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from .config import config
from .core import Pose2D
from .errors import ConfigError
from .localize import LocalizationConfig
from .monitor import MonitorKind, MonitorSpec
from .planners import PLANNER_PARAMS, PATH_PARAMS
from .raycast import ScanConfig
from .sim import DEFAULT_DT, NoiseConfig, VehicleParams
from .v2v import ConflictZone

logger = logging.getLogger(__name__)

SCENARIO_VERSION = 1
TOP_LEVEL_KEYS = ('version', 'name', 'map', 'duration', 'dt', 'seed', 'scan', 'noise',
                  'monitors', 'lap_line', 'v2v', 'vehicles')


class LapLine:
    """Start/finish segment; forward crossings go from its right side to its left side"""

    def __init__(self, x0: float, y0: float, x1: float, y1: float):
        if (x0, y0) == (x1, y1):
            raise ValueError("Lap line endpoints must differ")
        self.x0, self.y0, self.x1, self.y1 = float(x0), float(y0), float(x1), float(y1)

    def side(self, x: float, y: float) -> float:
        return (self.x1 - self.x0) * (y - self.y0) - (self.y1 - self.y0) * (x - self.x0)

    def crossed_forward(self, prev: Pose2D, new: Pose2D) -> bool:
        s0 = self.side(prev.x, prev.y)
        s1 = self.side(new.x, new.y)
        if not (s0 < 0.0 <= s1):
            return False
        # Where the motion segment meets the line, measured along the line
        frac = s0 / (s0 - s1) if s0 != s1 else 0.0
        px = prev.x + frac * (new.x - prev.x)
        py = prev.y + frac * (new.y - prev.y)
        dx, dy = self.x1 - self.x0, self.y1 - self.y0
        u = ((px - self.x0) * dx + (py - self.y0) * dy) / (dx * dx + dy * dy)
        return 0.0 <= u <= 1.0

    def as_list(self) -> List[List[float]]:
        return [[self.x0, self.y0], [self.x1, self.y1]]


@dataclass(frozen=True)
class V2VSettings:
    enabled: bool = False
    transport: str = 'loopback'  # 'loopback' or 'tcp'
    host: Optional[str] = None
    port: int = 0
    staleness_window: float = field(default_factory=lambda: config.v2v_staleness_window)
    timeout: float = field(default_factory=lambda: config.v2v_timeout)
    loss: float = 0.0
    latency: float = 0.0
    blackout: bool = False
    zone: Optional[ConflictZone] = None

    def __post_init__(self):
        errors = []
        if self.transport not in ('loopback', 'tcp'):
            errors.append(f"transport must be 'loopback' or 'tcp', got {self.transport!r}")
        if not self.staleness_window > 0:
            errors.append("staleness_window must be > 0")
        if not 0.0 <= self.loss <= 1.0:
            errors.append("loss must lie in [0, 1]")
        if self.latency < 0:
            errors.append("latency must be >= 0")
        if errors:
            raise ValueError("; ".join(errors))


@dataclass(frozen=True)
class VehicleConfig:
    id: int
    start: Pose2D
    planner: str
    speed: float = 0.0
    params: VehicleParams = VehicleParams()
    planner_rate: float = 20.0  # Hz
    planner_params: Mapping[str, Any] = field(default_factory=dict)
    localization: Optional[LocalizationConfig] = None


@dataclass(frozen=True)
class ScenarioConfig:
    map_image: Path
    map_metadata: Path
    vehicles: Tuple[VehicleConfig, ...]
    duration: float
    dt: float = DEFAULT_DT
    seed: int = 0
    name: str = 'scenario'
    scan: ScanConfig = ScanConfig()
    noise: NoiseConfig = NoiseConfig()
    monitors: Tuple[MonitorSpec, ...] = ()
    lap_line: Optional[LapLine] = None
    v2v: V2VSettings = V2VSettings()
    source: Optional[Path] = None

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    def vehicle(self, vehicle_id: int) -> VehicleConfig:
        for v in self.vehicles:
            if v.id == vehicle_id:
                return v
        raise KeyError(vehicle_id)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _unknown_keys(data: Mapping, allowed, path: str, errors: List[str]) -> bool:
    unknown = sorted(set(data) - set(allowed))
    for key in unknown:
        errors.append(f"{path}.{key}: unknown key" if path else f"{key}: unknown key")
    return bool(unknown)


def _build(cls, data, path: str, errors: List[str]):
    """Construct a dataclass from a JSON object, recording problems under path"""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        errors.append(f"{path}: expected an object")
        return None
    if _unknown_keys(data, [f.name for f in fields(cls)], path, errors):
        return None
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        errors.append(f"{path}: {e}")
        return None


def _number(data: Mapping, key: str, path: str, errors: List[str], default=None):
    value = data.get(key, default)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        errors.append(f"{path}: must be a finite number")
        return None
    return value


def _pose(value, path: str, errors: List[str]) -> Optional[Pose2D]:
    if (not isinstance(value, list) or len(value) not in (2, 3)
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
        errors.append(f"{path}: expected [x, y] or [x, y, theta]")
        return None
    return Pose2D.from_sequence(list(value) + [0.0] * (3 - len(value)))


def _zone(data, path: str, errors: List[str]) -> Optional[ConflictZone]:
    if not isinstance(data, dict):
        errors.append(f"{path}: expected an object")
        return None
    if _unknown_keys(data, ('center', 'entry_radius', 'inner_radius', 'capacity'), path, errors):
        return None
    center = _pose(data.get('center'), f"{path}.center", errors)
    if center is None:
        return None
    try:
        return ConflictZone(center, float(data.get('entry_radius', 0.0)),
                            float(data.get('inner_radius', 0.0)), int(data.get('capacity', 1)))
    except (TypeError, ValueError) as e:
        errors.append(f"{path}: {e}")
        return None


def _v2v(data, errors: List[str]) -> Optional[V2VSettings]:
    if data is None:
        return V2VSettings()
    if not isinstance(data, dict):
        errors.append("v2v: expected an object")
        return None
    data = dict(data)
    zone = None
    if 'zone' in data:
        zone = _zone(data.pop('zone'), 'v2v.zone', errors)
    settings = _build(V2VSettings, data, 'v2v', errors)
    if settings is None:
        return None
    return replace(settings, zone=zone)


def _monitors(data, zone: Optional[ConflictZone], errors: List[str]) -> Tuple[MonitorSpec, ...]:
    if data is None:
        return ()
    if not isinstance(data, list):
        errors.append("monitors: expected an array")
        return ()
    specs = []
    for i, item in enumerate(data):
        path = f"monitors[{i}]"
        if not isinstance(item, dict):
            errors.append(f"{path}: expected an object")
            continue
        if _unknown_keys(item, ('name', 'kind', 'limit', 'severity', 'zone'), path, errors):
            continue
        item = dict(item)
        item.setdefault('name', str(item.get('kind', '')).lower())
        if 'zone' in item:
            item['zone'] = _zone(item['zone'], f"{path}.zone", errors)
        elif item.get('kind') == MonitorKind.MUTUAL_EXCLUSION.value:
            item['zone'] = zone
        try:
            specs.append(MonitorSpec(**item))
        except (TypeError, ValueError) as e:
            errors.append(f"{path}: {e}")
    return tuple(specs)


def _planner_params(planner: str, data, base_dir: Path, path: str,
                    errors: List[str]) -> Dict[str, Any]:
    if data is None:
        return {}
    if not isinstance(data, dict):
        errors.append(f"{path}: expected an object")
        return {}
    if _unknown_keys(data, PLANNER_PARAMS[planner], path, errors):
        return {}
    params = dict(data)
    for key in PATH_PARAMS:
        if key in params:
            if not isinstance(params[key], str):
                errors.append(f"{path}.{key}: expected a file path")
                continue
            params[key] = str((base_dir / params[key]).resolve())
    return params


def _vehicle(data, index: int, base_dir: Path, errors: List[str]) -> Optional[VehicleConfig]:
    path = f"vehicles[{index}]"
    if not isinstance(data, dict):
        errors.append(f"{path}: expected an object")
        return None
    allowed = ('id', 'start', 'speed', 'params', 'planner', 'planner_rate', 'planner_params',
               'localization')
    if _unknown_keys(data, allowed, path, errors):
        return None

    before = len(errors)
    vehicle_id = data.get('id', index + 1)
    if isinstance(vehicle_id, bool) or not isinstance(vehicle_id, int):
        errors.append(f"{path}.id: must be an integer")
    start = _pose(data.get('start'), f"{path}.start", errors)
    speed = _number(data, 'speed', f"{path}.speed", errors, 0.0)
    if speed is not None and speed < 0:
        errors.append(f"{path}.speed: must be >= 0")
    rate = _number(data, 'planner_rate', f"{path}.planner_rate", errors, 20.0)
    if rate is not None and not rate > 0:
        errors.append(f"{path}.planner_rate: must be > 0")
    planner = data.get('planner')
    if planner not in PLANNER_PARAMS:
        errors.append(f"{path}.planner: must be one of {', '.join(sorted(PLANNER_PARAMS))}, "
                      f"got {planner!r}")
        planner_params: Dict[str, Any] = {}
    else:
        planner_params = _planner_params(planner, data.get('planner_params'), base_dir,
                                         f"{path}.planner_params", errors)
    params = _build(VehicleParams, data.get('params'), f"{path}.params", errors)
    localization = None
    if data.get('localization') is not None:
        localization = _build(LocalizationConfig, data['localization'],
                              f"{path}.localization", errors)
    if len(errors) > before:
        return None
    return VehicleConfig(vehicle_id, start, planner, float(speed), params, float(rate),
                         planner_params, localization)


def parse_scenario(data: Mapping, base_dir: Path = Path('.'), source: Optional[Path] = None,
                   seed: Optional[int] = None, duration: Optional[float] = None) -> ScenarioConfig:
    """Validate a scenario document; overrides are applied before validation"""
    errors: List[str] = []
    if not isinstance(data, dict):
        raise ConfigError(["scenario: expected a JSON object"])
    data = dict(data)
    if seed is not None:
        data['seed'] = seed
    if duration is not None:
        data['duration'] = duration
    _unknown_keys(data, TOP_LEVEL_KEYS, '', errors)

    version = data.get('version', SCENARIO_VERSION)
    if version != SCENARIO_VERSION:
        errors.append(f"version: unsupported scenario version {version!r}")

    map_image = map_metadata = None
    map_data = data.get('map')
    if not isinstance(map_data, dict) or 'metadata' not in map_data:
        errors.append("map: expected an object with 'metadata' (and optionally 'image')")
    elif not _unknown_keys(map_data, ('image', 'metadata'), 'map', errors):
        map_metadata = (base_dir / map_data['metadata']).resolve()
        if 'image' in map_data:
            map_image = (base_dir / map_data['image']).resolve()
        else:
            map_image = map_metadata.with_suffix('.pgm')

    duration_value = _number(data, 'duration', 'duration', errors)
    if duration_value is None:
        if 'duration' not in data:
            errors.append("duration: required")
    elif not duration_value > 0:
        errors.append("duration: must be > 0")
    dt = _number(data, 'dt', 'dt', errors, DEFAULT_DT)
    if dt is not None and not dt > 0:
        errors.append("dt: must be > 0")
    seed_value = data.get('seed', 0)
    if isinstance(seed_value, bool) or not isinstance(seed_value, int) or seed_value < 0:
        errors.append("seed: must be a non-negative integer")

    scan = _build(ScanConfig, data.get('scan'), 'scan', errors)
    noise = _build(NoiseConfig, data.get('noise'), 'noise', errors)
    v2v = _v2v(data.get('v2v'), errors)
    monitors = _monitors(data.get('monitors'), v2v.zone if v2v else None, errors)

    lap_line = None
    if data.get('lap_line') is not None:
        raw = data['lap_line']
        try:
            (x0, y0), (x1, y1) = raw
            lap_line = LapLine(x0, y0, x1, y1)
        except (TypeError, ValueError):
            errors.append("lap_line: expected [[x0, y0], [x1, y1]] with distinct endpoints")

    vehicles_data = data.get('vehicles')
    vehicles: List[VehicleConfig] = []
    if not isinstance(vehicles_data, list) or not vehicles_data:
        errors.append("vehicles: at least one vehicle is required")
    else:
        for i, item in enumerate(vehicles_data):
            vehicle = _vehicle(item, i, base_dir, errors)
            if vehicle is not None:
                vehicles.append(vehicle)
        ids = [v.id for v in vehicles]
        if len(set(ids)) != len(ids):
            errors.append(f"vehicles: ids must be unique, got {ids}")
        for i, v in enumerate(vehicles):
            if v.planner == 'roundabout' and (v2v is None or not v2v.enabled or v2v.zone is None):
                errors.append(f"vehicles[{i}].planner: roundabout needs v2v.enabled and v2v.zone")

    if errors:
        raise ConfigError(errors)

    return ScenarioConfig(
        map_image=map_image,
        map_metadata=map_metadata,
        vehicles=tuple(vehicles),
        duration=float(duration_value),
        dt=float(dt),
        seed=seed_value,
        name=str(data.get('name', source.stem if source else 'scenario')),
        scan=scan,
        noise=noise,
        monitors=monitors,
        lap_line=lap_line,
        v2v=v2v,
        source=source,
    )


def load_scenario(path, seed: Optional[int] = None,
                  duration: Optional[float] = None) -> ScenarioConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"{path}: scenario file not found"])
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}: invalid JSON ({e})"])
    scenario = parse_scenario(data, path.parent, path, seed, duration)
    logger.info(f"Loaded scenario '{scenario.name}' with {len(scenario.vehicles)} vehicle(s)")
    return scenario
