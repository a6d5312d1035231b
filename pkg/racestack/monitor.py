"""
Runtime safety monitors

Each monitor is a pure check over a world snapshot (and the scans taken from
it). FAILSAFE violations force the offending vehicle's speed to zero.
"""

import csv
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Sequence

from .core import ControlCommand, LaserScan
from .sim import World, footprint_hits_map
from .v2v import ConflictZone

logger = logging.getLogger(__name__)

VIOLATION_COLUMNS = ['time', 'monitor', 'vehicle', 'value']


class MonitorKind(str, Enum):
    MIN_CLEARANCE = 'MIN_CLEARANCE'
    MAX_SPEED = 'MAX_SPEED'
    ON_TRACK = 'ON_TRACK'
    MUTUAL_EXCLUSION = 'MUTUAL_EXCLUSION'


class Severity(str, Enum):
    WARN = 'WARN'
    FAILSAFE = 'FAILSAFE'


@dataclass(frozen=True)
class MonitorSpec:
    name: str
    kind: MonitorKind
    limit: Optional[float] = None
    severity: Severity = Severity.WARN
    zone: Optional[ConflictZone] = None

    def __post_init__(self):
        object.__setattr__(self, 'kind', MonitorKind(self.kind))
        object.__setattr__(self, 'severity', Severity(self.severity))
        if self.kind in (MonitorKind.MIN_CLEARANCE, MonitorKind.MAX_SPEED):
            if self.limit is None or not self.limit > 0:
                raise ValueError(f"Monitor {self.name}: {self.kind.value} needs a limit > 0")
        if self.kind == MonitorKind.MUTUAL_EXCLUSION and self.zone is None:
            raise ValueError(f"Monitor {self.name}: MUTUAL_EXCLUSION needs a zone")


@dataclass(frozen=True)
class Violation:
    name: str
    vehicle_id: int
    time: float
    value: float
    severity: Severity = Severity.WARN


def zone_occupants(world: World, zone: ConflictZone) -> List[int]:
    """Ground-truth ids whose reference point lies inside the zone entry radius"""
    return [e.id for e in world.vehicles if zone.contains(e.state.pose.x, e.state.pose.y)]


def check(specs: Sequence[MonitorSpec], world: World,
          scans: Optional[Mapping[int, LaserScan]] = None) -> List[Violation]:
    scans = scans or {}
    violations: List[Violation] = []
    for spec in specs:
        def flag(vehicle_id, value):
            violations.append(Violation(spec.name, vehicle_id, world.time, float(value),
                                        spec.severity))

        if spec.kind == MonitorKind.MIN_CLEARANCE:
            for vehicle_id in world.ids:
                scan = scans.get(vehicle_id)
                if scan is None:
                    continue
                d_min = float(scan.ranges.min())
                if d_min < spec.limit:
                    flag(vehicle_id, d_min)
        elif spec.kind == MonitorKind.MAX_SPEED:
            for entry in world.vehicles:
                if entry.state.v > spec.limit:
                    flag(entry.id, entry.state.v)
        elif spec.kind == MonitorKind.ON_TRACK:
            for entry in world.vehicles:
                if footprint_hits_map(world.grid, entry.state.pose, entry.params):
                    flag(entry.id, 1.0)
        elif spec.kind == MonitorKind.MUTUAL_EXCLUSION:
            occupants = zone_occupants(world, spec.zone)
            if len(occupants) > spec.zone.capacity:
                for vehicle_id in occupants:
                    flag(vehicle_id, len(occupants))
    return violations


def apply_failsafe(cmd: ControlCommand, violations: Iterable[Violation],
                   vehicle_id: int) -> ControlCommand:
    for v in violations:
        if v.vehicle_id == vehicle_id and v.severity == Severity.FAILSAFE:
            logger.debug(f"Fail-safe stop for vehicle {vehicle_id} ({v.name}={v.value:.3f})")
            return ControlCommand(0.0, cmd.kappa)
    return cmd


class ViolationLog:
    """CSV sink for violations, rows time,monitor,vehicle,value"""

    def __init__(self, path):
        self.path = Path(path)
        self._file = None
        self._writer = None
        self.count = 0

    def open(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, 'w', newline='')
        self._writer = csv.writer(self._file, lineterminator='\n')
        self._writer.writerow(VIOLATION_COLUMNS)
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

    def write(self, violations: Iterable[Violation]) -> None:
        for v in violations:
            if v.severity == Severity.WARN:
                logger.warning(f"⚠️ Monitor {v.name} violated by vehicle {v.vehicle_id} "
                               f"at t={v.time:.2f}s (value {v.value:.3f})")
            self._writer.writerow([f"{v.time:.6f}", v.name, v.vehicle_id, f"{v.value:.6f}"])
            self.count += 1
