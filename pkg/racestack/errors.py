"""Exception hierarchy for racestack"""

from typing import Any, List, Optional, Sequence


class RaceStackError(Exception):
    """Base class for every error raised by racestack"""


# Map and geometry

class MapLoadError(RaceStackError, ValueError):
    """Map image or metadata could not be turned into an OccupancyGrid"""


class MalformedHeader(MapLoadError):
    pass


class DimensionMismatch(MapLoadError):
    pass


class BadThreshold(MapLoadError):
    pass


class OutOfBounds(RaceStackError, ValueError):
    """World point falls outside the grid"""

    def __init__(self, x: float, y: float):
        super().__init__(f"Point ({x:.4f}, {y:.4f}) lies outside the grid")
        self.x = x
        self.y = y


# Simulation

class NonPositiveDt(RaceStackError, ValueError):
    pass


class UnknownVehicleId(RaceStackError, KeyError):
    def __init__(self, vehicle_id: Any):
        super().__init__(f"Unknown vehicle id: {vehicle_id!r}")
        self.vehicle_id = vehicle_id


# Localization

class NoFreeSpace(RaceStackError, ValueError):
    pass


# Planning

class EmptyGapList(RaceStackError, ValueError):
    pass


class EmptyPath(RaceStackError, ValueError):
    pass


class DegenerateGoal(RaceStackError, ValueError):
    pass


class OutOfDomain(RaceStackError, ValueError):
    pass


class NoConvergence(RaceStackError, RuntimeError):
    """Boundary-value solve hit max_iters without meeting tolerances"""

    def __init__(self, message: str, best_params: Any = None,
                 best_residual: Optional[Sequence[float]] = None):
        super().__init__(message)
        self.best_params = best_params
        self.best_residual = best_residual


# Learned approximation

class InsufficientData(RaceStackError, ValueError):
    pass


class SingularKernel(RaceStackError, ValueError):
    pass


class Untrained(RaceStackError, RuntimeError):
    pass


# V2V

class ParseError(RaceStackError, ValueError):
    """Bytes on the wire are not a valid V2V message"""


class VersionMismatch(ParseError):
    """Well-formed JSON missing fields this protocol version requires"""


class V2VConnectionRefused(RaceStackError, ConnectionError):
    pass


class V2VTimeout(RaceStackError, TimeoutError):
    pass


# Configuration and CLI

class ConfigError(RaceStackError, ValueError):
    """Invalid scenario or process configuration; carries every offending field path"""

    def __init__(self, errors: Sequence[str]):
        self.errors: List[str] = list(errors)
        super().__init__(f"Configuration validation failed: {'; '.join(self.errors)}")


class MissingLog(RaceStackError, FileNotFoundError):
    pass
