"""
State-lattice local planner

Trajectories are cubic curvature splines kappa(s') given by their arc length
and four equispaced knots. Each sampled goal is connected to the vehicle by a
damped Gauss-Newton shooting solve; feasible candidates are scored and the
cheapest one is turned into a speed/curvature command.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import shapely

from .core import (
    ControlCommand,
    OccupancyGrid,
    Pose2D,
    VehicleState,
    WaypointPath,
    compose_pose,
    to_local_frame,
    wrap_angle,
)
from .errors import DegenerateGoal, NoConvergence, OutOfDomain
from .sim import VehicleParams, footprint_polygon

logger = logging.getLogger(__name__)

# Maps knots (a, b, c, d) to power-basis coefficients in the normalized arc u = s'/s
PARAM_MAT = np.array([
    [1.0, 0.0, 0.0, 0.0],
    [-11.0 / 2, 9.0, -9.0 / 2, 1.0],
    [9.0, -45.0 / 2, 18.0, -9.0 / 2],
    [-9.0 / 2, 27.0 / 2, -27.0 / 2, 9.0 / 2],
])

MIN_GOAL_DISTANCE = 0.05
JACOBIAN_STEP = 1e-4
MAX_HALVINGS = 8


@dataclass(frozen=True)
class SplineParams:
    s: float
    a: float
    b: float
    c: float
    d: float

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"Spline arc length must be > 0, got {self.s}")

    @property
    def knots(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d])

    def coefs(self) -> Tuple[float, float, float, float]:
        """Power-basis coefficients in the normalized arc u = s'/s"""
        c0, c1, c2, c3 = PARAM_MAT @ self.knots
        return float(c0), float(c1), float(c2), float(c3)

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.a, self.b, self.c, self.d])


def kappa_at(p: SplineParams, s_query: float) -> float:
    """Curvature of the cubic through (0,a), (s/3,b), (2s/3,c), (s,d)"""
    if s_query < 0.0 or s_query > p.s:
        raise OutOfDomain(f"Arc position {s_query} outside [0, {p.s}]")
    c0, c1, c2, c3 = p.coefs()
    u = s_query / p.s
    return c0 + u * (c1 + u * (c2 + u * c3))


def max_abs_kappa(p: SplineParams, samples: int = 201) -> float:
    c0, c1, c2, c3 = p.coefs()
    u = np.linspace(0.0, 1.0, samples)
    return float(np.max(np.abs(c0 + u * (c1 + u * (c2 + u * c3)))))


@dataclass(frozen=True, eq=False)
class Trajectory:
    params: SplineParams
    start: VehicleState
    arc: np.ndarray  # (n+1,)
    poses: np.ndarray  # (n+1, 3) world x, y, theta
    kappas: np.ndarray  # (n+1,)

    @property
    def samples(self) -> List[Tuple[float, Pose2D, float]]:
        return [(float(s), Pose2D(*pose), float(k))
                for s, pose, k in zip(self.arc, self.poses, self.kappas)]

    @property
    def endpoint(self) -> VehicleState:
        return VehicleState(Pose2D(*self.poses[-1]), self.start.v, float(self.kappas[-1]))


def _integrate(coefs, s: float, n_steps: int, x: float = 0.0, y: float = 0.0,
               theta: float = 0.0, keep: bool = False):
    """RK4 on theta' = kappa(s'), x' = cos(theta), y' = sin(theta)"""
    c0, c1, c2, c3 = coefs
    h = s / n_steps
    inv_s = 1.0 / s

    def kappa(arc):
        u = arc * inv_s
        return c0 + u * (c1 + u * (c2 + u * c3))

    trace = [(x, y, theta)] if keep else None
    arc = 0.0
    for i in range(n_steps):
        arc = i * h
        k1 = kappa(arc)
        k2 = kappa(arc + 0.5 * h)
        k4 = kappa(arc + h)
        th2 = theta + 0.5 * h * k1
        th3 = theta + 0.5 * h * k2
        th4 = theta + h * k2
        x += h / 6.0 * (math.cos(theta) + 2.0 * math.cos(th2) + 2.0 * math.cos(th3) + math.cos(th4))
        y += h / 6.0 * (math.sin(theta) + 2.0 * math.sin(th2) + 2.0 * math.sin(th3) + math.sin(th4))
        theta += h / 6.0 * (k1 + 4.0 * k2 + k4)
        if keep:
            trace.append((x, y, theta))
    return (x, y, theta), trace


def integrate_trajectory(x0: VehicleState, p: SplineParams, n_steps: int = 64) -> Trajectory:
    """Forward-integrate a spline from x0 (world frame)"""
    if n_steps < 8:
        raise ValueError(f"n_steps must be >= 8, got {n_steps}")
    pose = x0.pose
    _, trace = _integrate(p.coefs(), p.s, n_steps, pose.x, pose.y, pose.theta, keep=True)
    poses = np.array(trace)
    poses[:, 2] = [wrap_angle(t) for t in poses[:, 2]]
    arc = np.arange(n_steps + 1) * (p.s / n_steps)
    arc[-1] = p.s
    c0, c1, c2, c3 = p.coefs()
    u = arc / p.s
    kappas = c0 + u * (c1 + u * (c2 + u * c3))
    kappas[-1] = p.d
    return Trajectory(p, x0, arc, poses, kappas)


# ---------------------------------------------------------------------------
# Boundary-value solve
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BvpOptions:
    pos_tol: float = 1e-3
    heading_tol: float = 1e-3
    max_iters: int = 50
    n_steps: int = 64
    kappa_max: Optional[float] = None  # reject converged splines above this
    retry_guesses: bool = True

    def __post_init__(self):
        if self.pos_tol <= 0 or self.heading_tol <= 0:
            raise ValueError("BVP tolerances must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.n_steps < 8:
            raise ValueError("n_steps must be >= 8")


class _Problem:
    def __init__(self, a: float, d: float, goal: Pose2D, n_steps: int, s_min: float):
        self.a = a
        self.d = d
        self.goal = goal
        self.n_steps = n_steps
        self.s_min = s_min

    def residual(self, q: np.ndarray) -> np.ndarray:
        b, c, s = q
        coefs = PARAM_MAT @ np.array([self.a, b, c, self.d])
        (x, y, theta), _ = _integrate(coefs, s, self.n_steps)
        return np.array([x - self.goal.x, y - self.goal.y, wrap_angle(theta - self.goal.theta)])

    def jacobian(self, q: np.ndarray) -> np.ndarray:
        jac = np.empty((3, 3))
        for j in range(3):
            dq = np.zeros(3)
            dq[j] = JACOBIAN_STEP
            jac[:, j] = (self.residual(q + dq) - self.residual(q - dq)) / (2.0 * JACOBIAN_STEP)
        return jac

    def clamp(self, q: np.ndarray) -> np.ndarray:
        q = q.copy()
        q[2] = max(q[2], self.s_min)
        return q


def _converged(r: np.ndarray, opts: BvpOptions) -> bool:
    return math.hypot(r[0], r[1]) < opts.pos_tol and abs(r[2]) < opts.heading_tol


def _gauss_newton(problem: _Problem, q: np.ndarray, opts: BvpOptions):
    """Damped Gauss-Newton; returns (converged, best q, best residual)"""
    q = problem.clamp(q)
    r = problem.residual(q)
    norm = float(np.linalg.norm(r))
    for _ in range(opts.max_iters):
        if _converged(r, opts):
            return True, q, r
        jac = problem.jacobian(q)
        delta = np.linalg.lstsq(jac, -r, rcond=None)[0]

        accepted = False
        alpha = 1.0
        for _ in range(MAX_HALVINGS + 1):
            q_try = problem.clamp(q + alpha * delta)
            r_try = problem.residual(q_try)
            n_try = float(np.linalg.norm(r_try))
            if n_try < norm:
                q, r, norm = q_try, r_try, n_try
                accepted = True
                break
            alpha *= 0.5

        if not accepted:
            # Plain gradient step on 0.5*|r|^2 with a Cauchy step length
            grad = jac.T @ r
            jg = jac @ grad
            denom = float(jg @ jg)
            if denom <= 0.0:
                break
            beta = float(grad @ grad) / denom
            for _ in range(MAX_HALVINGS + 1):
                q_try = problem.clamp(q - beta * grad)
                r_try = problem.residual(q_try)
                n_try = float(np.linalg.norm(r_try))
                if n_try < norm:
                    q, r, norm = q_try, r_try, n_try
                    accepted = True
                    break
                beta *= 0.5
            if not accepted:
                break
    return _converged(r, opts), q, r


def _initial_guesses(a: float, d: float, goal: Pose2D, dist: float, retry: bool):
    yield np.array([a + (d - a) / 3.0, a + 2.0 * (d - a) / 3.0,
                    dist * (1.0 + 0.2 * goal.theta ** 2)])
    if not retry:
        return
    # Circular arc through the goal position
    bearing = math.atan2(goal.y, goal.x)
    k_arc = 2.0 * math.sin(bearing) / dist
    s_arc = dist if abs(bearing) < 1e-9 else dist * bearing / math.sin(bearing)
    yield np.array([k_arc, k_arc, s_arc])
    # Length and knot guess from the heading change
    d_theta = abs(goal.theta)
    s = dist * (d_theta ** 2 / 5.0 + 1.0) + 0.4 * d_theta + 1e-4
    ca = 6.0 * goal.theta / s ** 2 - 2.0 * a / s + 4.0 * d / s
    cb = 3.0 / s ** 2 * (a + d) + 6.0 * goal.theta / s ** 3
    yield np.array([a + ca * s / 3.0 + cb * s ** 2 / 9.0,
                    a + ca * 2.0 * s / 3.0 + cb * 4.0 * s ** 2 / 9.0, s])


def solve_bvp(x0: VehicleState, goal: Pose2D, kappa_g: float = 0.0,
              opts: BvpOptions = BvpOptions()) -> SplineParams:
    """Spline from x0 to a goal pose given in x0's local frame

    a and d are pinned to x0.kappa and kappa_g; (b, c, s) are solved for.
    """
    dist = math.hypot(goal.x, goal.y)
    if dist < MIN_GOAL_DISTANCE:
        raise DegenerateGoal(f"Goal is {dist:.4f} m away (minimum {MIN_GOAL_DISTANCE} m)")

    a = x0.kappa
    problem = _Problem(a, kappa_g, goal, opts.n_steps, 0.5 * dist)
    best_q, best_r = None, None
    reason = "max_iters reached"
    for guess in _initial_guesses(a, kappa_g, goal, dist, opts.retry_guesses):
        ok, q, r = _gauss_newton(problem, guess, opts)
        params = SplineParams(float(q[2]), a, float(q[0]), float(q[1]), kappa_g)
        if ok and opts.kappa_max is not None and max_abs_kappa(params) > opts.kappa_max:
            ok = False
            reason = f"solution exceeds kappa_max {opts.kappa_max}"
        if ok:
            return params
        if best_r is None or np.linalg.norm(r) < np.linalg.norm(best_r):
            best_q, best_r = q, r

    best = SplineParams(float(best_q[2]), a, float(best_q[0]), float(best_q[1]), kappa_g)
    raise NoConvergence(
        f"BVP to ({goal.x:.3f}, {goal.y:.3f}, {goal.theta:.3f}) failed: {reason}",
        best_params=best, best_residual=tuple(float(v) for v in best_r))


# ---------------------------------------------------------------------------
# Goal sampling and evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GoalRegion:
    centerline: WaypointPath
    longitudinal: Tuple[float, ...]
    lateral: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, 'longitudinal', tuple(float(v) for v in self.longitudinal))
        object.__setattr__(self, 'lateral', tuple(float(v) for v in self.lateral))
        if not self.longitudinal or not self.lateral:
            raise ValueError("Goal region offset lists must be nonempty")


class GoalSample(NamedTuple):
    local: Pose2D
    world: Pose2D
    longitudinal: float
    lateral: float


def sample_goals(region: GoalRegion, ego_pose: Pose2D) -> List[GoalSample]:
    """Goals displaced along and across the centerline ahead of the ego projection"""
    arc0, _, _, _ = region.centerline.project(ego_pose.x, ego_pose.y)
    goals = []
    for lon in region.longitudinal:
        x, y, heading, _ = region.centerline.sample(arc0 + lon)
        for lat in region.lateral:
            world = Pose2D(x - lat * math.sin(heading), y + lat * math.cos(heading), heading)
            local = to_local_frame(ego_pose, world)
            if local.x <= 0.0:
                continue
            goals.append(GoalSample(local, world, lon, lat))
    return goals


@dataclass(frozen=True)
class CostWeights:
    w_lat: float = 1.0
    w_kappa: float = 0.5
    w_len: float = 0.1
    a_lat_max: float = 4.0

    def __post_init__(self):
        if min(self.w_lat, self.w_kappa, self.w_len, self.a_lat_max) < 0:
            raise ValueError("Cost weights must be >= 0")


@dataclass(frozen=True)
class Evaluation:
    feasible: bool
    cost: float
    v_feasible: float
    max_kappa: float
    lateral: float
    reason: str = ''


def evaluate_trajectory(traj: Trajectory, grid: OccupancyGrid, peers: Sequence,
                        weights: CostWeights, vehicle: VehicleParams = VehicleParams(),
                        centerline: Optional[WaypointPath] = None,
                        margin: float = 0.05) -> Evaluation:
    """Score a trajectory; infeasible on collision risk or excess curvature

    peers are (Pose2D, VehicleParams) pairs. The lateral term is the endpoint's
    distance from the centerline (0 without one).
    """
    max_kappa = max(max_abs_kappa(traj.params), float(np.max(np.abs(traj.kappas))))
    if max_kappa > 0.0:
        v_feasible = min(vehicle.v_max, math.sqrt(weights.a_lat_max / max_kappa))
    else:
        v_feasible = vehicle.v_max

    lateral = 0.0
    if centerline is not None:
        end = traj.poses[-1]
        _, _, _, lateral = centerline.project(end[0], end[1])

    def infeasible(reason):
        return Evaluation(False, math.inf, v_feasible, max_kappa, lateral, reason)

    if max_kappa > vehicle.kappa_max:
        return infeasible('curvature')

    inflation = vehicle.width / 2.0 + margin
    xs = traj.poses[:, 0]
    ys = traj.poses[:, 1]
    clearance = grid.clearance_at(xs, ys) - grid.resolution / 2.0
    if np.any(clearance < inflation):
        return infeasible('map')

    if peers:
        points = shapely.points(np.column_stack([xs, ys]))
        for peer_pose, peer_params in peers:
            poly = footprint_polygon(peer_pose, peer_params)
            if np.any(shapely.distance(points, poly) < inflation):
                return infeasible('peer')

    cost = (weights.w_lat * abs(lateral) + weights.w_kappa * max_kappa
            + weights.w_len * traj.params.s)
    return Evaluation(True, cost, v_feasible, max_kappa, lateral)


# ---------------------------------------------------------------------------
# Planner step
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatticeOptions:
    bvp: BvpOptions = BvpOptions()
    vehicle: VehicleParams = VehicleParams()
    control_dt: float = 0.01
    margin: float = 0.05
    kappa_goal: float = 0.0
    workers: int = 4


@dataclass(frozen=True, eq=False)
class Candidate:
    goal: GoalSample
    trajectory: Trajectory
    evaluation: Evaluation


def _solve_goal(x0: VehicleState, goal: GoalSample, opts: LatticeOptions) -> Optional[SplineParams]:
    try:
        return solve_bvp(x0, goal.local, opts.kappa_goal, opts.bvp)
    except (NoConvergence, DegenerateGoal) as e:
        logger.debug(f"Skipping lattice goal lon={goal.longitudinal} lat={goal.lateral}: {e}")
        return None


def plan_candidates(x0: VehicleState, region: GoalRegion, grid: OccupancyGrid, peers: Sequence,
                    weights: CostWeights, opts: LatticeOptions,
                    executor: Optional[ThreadPoolExecutor] = None) -> List[Candidate]:
    """Solve and evaluate every sampled goal, in goal order"""
    goals = sample_goals(region, x0.pose)
    if executor is not None:
        solutions = list(executor.map(lambda g: _solve_goal(x0, g, opts), goals))
    elif opts.workers > 1 and len(goals) > 1:
        with ThreadPoolExecutor(max_workers=opts.workers) as pool:
            solutions = list(pool.map(lambda g: _solve_goal(x0, g, opts), goals))
    else:
        solutions = [_solve_goal(x0, g, opts) for g in goals]

    candidates = []
    for goal, params in zip(goals, solutions):
        if params is None:
            continue
        traj = integrate_trajectory(x0, params, opts.bvp.n_steps)
        evaluation = evaluate_trajectory(traj, grid, peers, weights, opts.vehicle,
                                         region.centerline, opts.margin)
        candidates.append(Candidate(goal, traj, evaluation))
    return candidates


def select_best(candidates: Sequence[Candidate]) -> Optional[Candidate]:
    feasible = [c for c in candidates if c.evaluation.feasible]
    if not feasible:
        return None
    return min(feasible, key=lambda c: (c.evaluation.cost, abs(c.evaluation.lateral),
                                        c.trajectory.params.s))


def plan_step(x0: VehicleState, region: GoalRegion, grid: OccupancyGrid, peers: Sequence,
              weights: CostWeights, opts: LatticeOptions = LatticeOptions(),
              executor: Optional[ThreadPoolExecutor] = None
              ) -> Tuple[Optional[Trajectory], ControlCommand]:
    """One planning cycle; stops when no feasible trajectory exists"""
    best = select_best(plan_candidates(x0, region, grid, peers, weights, opts, executor))
    if best is None:
        logger.debug("Lattice planner found no feasible trajectory; stopping")
        return None, ControlCommand.stop()

    p = best.trajectory.params
    v = best.evaluation.v_feasible
    kappa = kappa_at(p, min(v * opts.control_dt, p.s))
    kappa = min(max(kappa, -opts.vehicle.kappa_max), opts.vehicle.kappa_max)
    return best.trajectory, ControlCommand(v, kappa)


def local_goal_to_world(x0: VehicleState, goal_local: Pose2D) -> Pose2D:
    return compose_pose(x0.pose, goal_local)
