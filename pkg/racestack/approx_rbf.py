"""
Learned approximation of the lattice BVP solver

A Gaussian RBF network maps goal poses (x, y, heading) to spline parameters
(s, b, c, d). Weights are solved algebraically with a pseudo-inverse, so every
training goal is reproduced exactly.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import pinv
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .core import Pose2D, VehicleState
from .errors import InsufficientData, NoConvergence, DegenerateGoal, SingularKernel, Untrained
from .plan_lattice import BvpOptions, SplineParams, integrate_trajectory, solve_bvp

logger = logging.getLogger(__name__)

MIN_TRAINING_PAIRS = 4
RESIDUAL_LIMIT = 1e-6
JITTER = 1e-10

NETWORK_MAGIC = b'RSRBF\x00'
NETWORK_VERSION = 1


@dataclass(frozen=True)
class GoalLattice:
    x_range: Tuple[float, float] = (1.5, 4.0)
    y_range: Tuple[float, float] = (-1.0, 1.0)
    heading_range: Tuple[float, float] = (-0.3, 0.3)
    x_count: int = 9
    y_count: int = 9
    heading_count: int = 3

    def __post_init__(self):
        for name in ('x_count', 'y_count', 'heading_count'):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def axes(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (np.linspace(*self.x_range, self.x_count),
                np.linspace(*self.y_range, self.y_count),
                np.linspace(*self.heading_range, self.heading_count))

    def goals(self) -> np.ndarray:
        """(N, 3) goals, x outermost, heading innermost"""
        xs, ys, hs = self.axes()
        grid = np.array(np.meshgrid(xs, ys, hs, indexing='ij'))
        return grid.reshape(3, -1).T

    def midpoints(self) -> np.ndarray:
        """Cell-center (x, y) goals on every heading layer"""
        xs, ys, hs = self.axes()
        mx = 0.5 * (xs[:-1] + xs[1:])
        my = 0.5 * (ys[:-1] + ys[1:])
        grid = np.array(np.meshgrid(mx, my, hs, indexing='ij'))
        return grid.reshape(3, -1).T

    @property
    def extent(self) -> float:
        return max(self.x_range[1] - self.x_range[0], self.y_range[1] - self.y_range[0], 1e-9)


@dataclass(frozen=True, eq=False)
class TrainingSet:
    goals: np.ndarray  # (M, 3)
    targets: np.ndarray  # (M, 4) s, b, c, d
    a: float
    failures: int

    def __len__(self):
        return len(self.goals)


@dataclass(frozen=True, eq=False)
class RbfNetwork:
    centers: np.ndarray  # (M, 3) raw goal coordinates
    epsilon: float
    weights: np.ndarray  # (M, 4)
    in_center: np.ndarray
    in_scale: np.ndarray
    out_mean: np.ndarray
    out_scale: np.ndarray
    a: float
    training_residual: float
    jitter: float = 0.0
    trained: bool = True

    @property
    def size(self) -> int:
        return int(self.centers.shape[0])

    def normalize(self, goals: np.ndarray) -> np.ndarray:
        return (goals - self.in_center) / self.in_scale


def _as_goal_array(goal: Union[Pose2D, Sequence[float], np.ndarray]) -> np.ndarray:
    if isinstance(goal, Pose2D):
        return np.array([[goal.x, goal.y, goal.theta]])
    return np.asarray(goal, dtype=float).reshape(-1, 3)


def build_training_set(x0: VehicleState, goals: Union[GoalLattice, np.ndarray],
                       bvp_opts: BvpOptions = BvpOptions(), kappa_g: float = 0.0) -> TrainingSet:
    """Solve the BVP for every lattice goal; failures are dropped and counted"""
    goal_array = goals.goals() if isinstance(goals, GoalLattice) else _as_goal_array(goals)
    kept_goals, targets = [], []
    failures = 0
    for gx, gy, gh in goal_array:
        if gx <= 0.0:
            failures += 1
            continue
        try:
            p = solve_bvp(x0, Pose2D(gx, gy, gh), kappa_g, bvp_opts)
        except (NoConvergence, DegenerateGoal) as e:
            logger.debug(f"Training goal ({gx:.3f}, {gy:.3f}, {gh:.3f}) skipped: {e}")
            failures += 1
            continue
        kept_goals.append((gx, gy, gh))
        targets.append((p.s, p.b, p.c, p.d))

    if len(kept_goals) < MIN_TRAINING_PAIRS:
        raise InsufficientData(
            f"Only {len(kept_goals)} converged training pairs (need {MIN_TRAINING_PAIRS}); "
            f"{failures} goals failed")
    if failures:
        logger.warning(f"⚠️ {failures} of {len(goal_array)} training goals did not converge")
    return TrainingSet(np.array(kept_goals, dtype=float), np.array(targets, dtype=float),
                       x0.kappa, failures)


def _kernel(epsilon: float, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    r = cdist(a, b)
    return np.exp(-(epsilon * r) ** 2)


def _relative_residual(phi: np.ndarray, weights: np.ndarray, targets: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(targets))))
    return float(np.max(np.abs(phi @ weights - targets))) / scale


def train_rbf(dataset: TrainingSet, epsilon: Optional[float] = None) -> RbfNetwork:
    goals = np.asarray(dataset.goals, dtype=float)
    targets = np.asarray(dataset.targets, dtype=float)
    m = len(goals)
    if m < 1:
        raise InsufficientData("Cannot train on an empty dataset")
    if len(np.unique(goals, axis=0)) != m:
        raise SingularKernel("Training inputs contain duplicate goals")

    lo = goals.min(axis=0)
    hi = goals.max(axis=0)
    in_center = 0.5 * (lo + hi)
    in_scale = 0.5 * (hi - lo)
    in_scale[in_scale == 0.0] = 1.0
    x = (goals - in_center) / in_scale

    out_mean = targets.mean(axis=0)
    out_scale = targets.std(axis=0)
    out_scale[out_scale == 0.0] = 1.0
    y = (targets - out_mean) / out_scale

    if epsilon is None:
        if m == 1:
            epsilon = 1.0
        else:
            nearest, _ = cKDTree(x).query(x, k=2)
            epsilon = 1.0 / float(np.median(nearest[:, 1]))
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")

    phi = _kernel(epsilon, x, x)
    weights = pinv(phi) @ y
    residual = _relative_residual(phi, weights, y)
    jitter = 0.0
    if residual > RESIDUAL_LIMIT:
        jitter = JITTER
        logger.warning(f"⚠️ Kernel ill-conditioned (residual {residual:.2e}); retrying with jitter")
        weights = pinv(phi + jitter * np.eye(m)) @ y
        residual = _relative_residual(phi, weights, y)
        if residual > RESIDUAL_LIMIT:
            raise SingularKernel(f"Training residual {residual:.2e} exceeds {RESIDUAL_LIMIT}")

    logger.info(f"RBF trained: M={m}, epsilon={epsilon:.4f}, residual={residual:.2e}")
    return RbfNetwork(goals.copy(), float(epsilon), weights, in_center, in_scale,
                      out_mean, out_scale, float(dataset.a), residual, jitter)


def infer_batch(net: Optional[RbfNetwork], goals) -> np.ndarray:
    """(K, 5) rows of s, a, b, c, d"""
    if net is None or not net.trained:
        raise Untrained("RBF network has not been trained")
    g = net.normalize(_as_goal_array(goals))
    out = _kernel(net.epsilon, g, net.normalize(net.centers)) @ net.weights
    out = out * net.out_scale + net.out_mean
    result = np.empty((len(g), 5))
    result[:, 0] = out[:, 0]
    result[:, 1] = net.a
    result[:, 2:] = out[:, 1:]
    return result


def infer(net: Optional[RbfNetwork], goal) -> SplineParams:
    s, a, b, c, d = infer_batch(net, goal)[0]
    return SplineParams(max(float(s), 1e-6), float(a), float(b), float(c), float(d))


@dataclass(frozen=True)
class ErrorReport:
    worst: float
    mean: float
    count: int


def endpoint_error(net: RbfNetwork, goal: np.ndarray, x0: VehicleState, extent: float,
                   n_steps: int) -> float:
    traj = integrate_trajectory(x0, infer(net, goal), n_steps)
    end = traj.poses[-1]
    dx = (end[0] - goal[0]) / extent
    dy = (end[1] - goal[1]) / extent
    dh = math.remainder(end[2] - goal[2], 2.0 * math.pi) / math.pi
    return math.sqrt(dx * dx + dy * dy + dh * dh)


def test_error(net: RbfNetwork, test_goals, bvp_opts: BvpOptions = BvpOptions(),
               extent: Optional[float] = None,
               x0: Optional[VehicleState] = None) -> ErrorReport:
    """Endpoint-space error of inferred splines: position over lattice extent, heading over pi"""
    goals = _as_goal_array(test_goals) if len(test_goals) else np.empty((0, 3))
    if len(goals) == 0:
        return ErrorReport(0.0, 0.0, 0)
    if extent is None:
        span = net.centers.max(axis=0) - net.centers.min(axis=0)
        extent = max(float(span[0]), float(span[1]), 1e-9)
    x0 = x0 or VehicleState(Pose2D(), 0.0, net.a)
    errors = np.array([endpoint_error(net, g, x0, extent, bvp_opts.n_steps) for g in goals])
    return ErrorReport(float(errors.max()), float(errors.mean()), len(errors))


# Not a pytest test
test_error.__test__ = False


def save_network(net: RbfNetwork, path) -> None:
    """Versioned flat binary: magic, version, JSON header, little-endian float64 blocks"""
    if not net.trained:
        raise Untrained("Refusing to persist an untrained network")
    blocks = [
        ('centers', net.centers), ('weights', net.weights),
        ('in_center', net.in_center), ('in_scale', net.in_scale),
        ('out_mean', net.out_mean), ('out_scale', net.out_scale),
        ('scalars', np.array([net.epsilon, net.a, net.training_residual, net.jitter])),
    ]
    header = json.dumps({'blocks': [[name, list(arr.shape)] for name, arr in blocks]},
                        sort_keys=True, separators=(',', ':')).encode()
    with open(path, 'wb') as f:
        f.write(NETWORK_MAGIC)
        f.write(struct.pack('<HI', NETWORK_VERSION, len(header)))
        f.write(header)
        for _, arr in blocks:
            f.write(np.ascontiguousarray(arr, dtype='<f8').tobytes())


def load_network(path) -> RbfNetwork:
    data = Path(path).read_bytes()
    if not data.startswith(NETWORK_MAGIC):
        raise ValueError(f"{path} is not an RBF network file")
    offset = len(NETWORK_MAGIC)
    version, header_len = struct.unpack_from('<HI', data, offset)
    if version != NETWORK_VERSION:
        raise ValueError(f"Unsupported network file version {version}")
    offset += struct.calcsize('<HI')
    header = json.loads(data[offset:offset + header_len])
    offset += header_len

    arrays = {}
    for name, shape in header['blocks']:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype='<f8', count=count, offset=offset).astype(float)
        arrays[name] = arr.reshape(shape)
        offset += 8 * count
    epsilon, a, residual, jitter = (float(v) for v in arrays['scalars'])
    return RbfNetwork(arrays['centers'], epsilon, arrays['weights'], arrays['in_center'],
                      arrays['in_scale'], arrays['out_mean'], arrays['out_scale'], a, residual,
                      jitter)
