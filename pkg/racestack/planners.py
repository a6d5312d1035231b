"""
Planner registry

Every planner exposes plan(ctx) -> ControlCommand. The runner builds one per
vehicle from the scenario's planner name and planner_params.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import Any, Callable, Dict, FrozenSet, Mapping, Optional, Sequence

from .approx_rbf import infer_batch, load_network
from .config import config
from .core import ControlCommand, LaserScan, Pose2D, VehicleState, load_waypoints, to_local_frame
from .errors import ConfigError, ParseError, V2VConnectionRefused, V2VTimeout
from .plan_ftg import FtgConfig, ftg_command
from .plan_lattice import (
    BvpOptions,
    Candidate,
    CostWeights,
    GoalRegion,
    LatticeOptions,
    SplineParams,
    evaluate_trajectory,
    integrate_trajectory,
    kappa_at,
    plan_step,
    sample_goals,
    select_best,
)
from .plan_pursuit import PurePursuitTracker, PursuitConfig, find_lookahead_point
from .sim import VehicleParams, World
from .v2v import ConflictZone, RoundaboutController

logger = logging.getLogger(__name__)


def _field_names(cls) -> FrozenSet[str]:
    return frozenset(f.name for f in fields(cls))


_PATH_KEYS = frozenset({'path', 'closed'})
_REGION_KEYS = frozenset({'centerline', 'closed', 'longitudinal', 'lateral', 'weights', 'margin'})

PLANNER_PARAMS: Dict[str, FrozenSet[str]] = {
    'ftg': _field_names(FtgConfig) | {'goal_path', 'closed', 'lookahead'},
    'pursuit': _PATH_KEYS | _field_names(PursuitConfig),
    'lattice': _REGION_KEYS | {'bvp', 'kappa_goal', 'workers'},
    'rbf': _REGION_KEYS | {'network', 'n_steps'},
    'roundabout': _PATH_KEYS | _field_names(PursuitConfig) | {'stop_margin', 'stop_decel'},
}
# Keys holding file paths, resolved against the scenario file
PATH_PARAMS = ('path', 'goal_path', 'centerline', 'network')


@dataclass(frozen=True)
class PlannerContext:
    time: float
    vehicle_id: int
    state: VehicleState  # pose is the localization estimate when one is running
    world: World
    scan: Optional[LaserScan] = None

    def peers(self):
        """(pose, params) of every other vehicle"""
        return [(e.state.pose, e.params) for e in self.world.vehicles if e.id != self.vehicle_id]


class Planner:
    needs_scan = False

    def plan(self, ctx: PlannerContext) -> ControlCommand:
        raise NotImplementedError

    def close(self) -> None:
        pass


class FtgPlanner(Planner):
    needs_scan = True

    def __init__(self, cfg: FtgConfig, kappa_max: float, goal_path=None, lookahead: float = 1.5):
        self.cfg = cfg
        self.kappa_max = kappa_max
        self.goal_path = goal_path
        self.lookahead = lookahead
        self._cursor = 0

    def goal_angle(self, pose: Pose2D) -> float:
        if self.goal_path is None:
            return 0.0
        point = find_lookahead_point(self.goal_path, pose, self.lookahead, self._cursor)
        self._cursor = point.segment
        local = to_local_frame(pose, Pose2D(point.x, point.y))
        return math.atan2(local.y, local.x)

    def plan(self, ctx: PlannerContext) -> ControlCommand:
        return ftg_command(ctx.scan, self.goal_angle(ctx.state.pose), self.cfg, self.kappa_max)


class PursuitPlanner(Planner):
    def __init__(self, tracker: PurePursuitTracker):
        self.tracker = tracker

    def plan(self, ctx: PlannerContext) -> ControlCommand:
        return self.tracker.command(ctx.state.pose)


class LatticePlanner(Planner):
    def __init__(self, region: GoalRegion, weights: CostWeights, opts: LatticeOptions):
        self.region = region
        self.weights = weights
        self.opts = opts
        self.executor = (ThreadPoolExecutor(max_workers=opts.workers, thread_name_prefix='lattice')
                         if opts.workers > 1 else None)
        self.last_trajectory = None

    def plan(self, ctx: PlannerContext) -> ControlCommand:
        self.last_trajectory, cmd = plan_step(ctx.state, self.region, ctx.world.grid,
                                              ctx.peers(), self.weights, self.opts, self.executor)
        return cmd

    def close(self) -> None:
        if self.executor is not None:
            self.executor.shutdown(wait=True)
            self.executor = None


class RbfPlanner(Planner):
    """Lattice planner with the BVP solve replaced by network inference"""

    def __init__(self, network, region: GoalRegion, weights: CostWeights, vehicle: VehicleParams,
                 control_dt: float, margin: float = 0.05, n_steps: int = 64):
        self.network = network
        self.region = region
        self.weights = weights
        self.vehicle = vehicle
        self.control_dt = control_dt
        self.margin = margin
        self.n_steps = n_steps
        self.last_trajectory = None

    def plan(self, ctx: PlannerContext) -> ControlCommand:
        goals = sample_goals(self.region, ctx.state.pose)
        if not goals:
            return ControlCommand.stop()
        rows = infer_batch(self.network, [[g.local.x, g.local.y, g.local.theta] for g in goals])
        peers = ctx.peers()
        candidates = []
        for goal, (s, a, b, c, d) in zip(goals, rows):
            params = SplineParams(max(float(s), 1e-6), float(a), float(b), float(c), float(d))
            traj = integrate_trajectory(ctx.state, params, self.n_steps)
            evaluation = evaluate_trajectory(traj, ctx.world.grid, peers, self.weights,
                                             self.vehicle, self.region.centerline, self.margin)
            candidates.append(Candidate(goal, traj, evaluation))
        best = select_best(candidates)
        if best is None:
            self.last_trajectory = None
            return ControlCommand.stop()
        self.last_trajectory = best.trajectory
        p = best.trajectory.params
        v = best.evaluation.v_feasible
        kappa = kappa_at(p, min(v * self.control_dt, p.s))
        return ControlCommand(v, min(max(kappa, -self.vehicle.kappa_max), self.vehicle.kappa_max))


class RoundaboutPlanner(Planner):
    """Publishes intent, pulls peers, and lets the roundabout controller gate pursuit"""

    def __init__(self, controller: RoundaboutController, endpoint):
        self.controller = controller
        self.endpoint = endpoint
        self._channel_down = False

    def _channel_error(self, action: str, error: Exception) -> None:
        if not self._channel_down:
            logger.warning(f"⚠️ Vehicle {self.controller.vehicle_id}: V2V {action} failed "
                           f"({error}); treating peers as unknown")
        self._channel_down = True

    def plan(self, ctx: PlannerContext) -> ControlCommand:
        peers = None
        try:
            peers = self.endpoint.fetch_peers(-math.inf, ctx.time)
            self._channel_down = False
        except (V2VTimeout, V2VConnectionRefused, ParseError) as e:
            self._channel_error('fetch', e)

        cmd = self.controller.command(ctx.state, peers)
        others = [(e.id, e.state.pose) for e in ctx.world.vehicles]
        try:
            self.endpoint.publish_state(self.controller.message(ctx.time, others, ctx.state.pose))
        except (V2VTimeout, V2VConnectionRefused, ParseError) as e:
            self._channel_error('publish', e)
        return cmd


# ---------------------------------------------------------------------------
# Factories
# ---------------------------------------------------------------------------

def _subset(cls, params: Mapping[str, Any]):
    names = _field_names(cls)
    return cls(**{k: v for k, v in params.items() if k in names})


def _pursuit_tracker(params: Mapping[str, Any], vehicle: VehicleParams) -> PurePursuitTracker:
    if 'path' not in params:
        raise ValueError("'path' (waypoint CSV) is required")
    path = load_waypoints(params['path'], closed=bool(params.get('closed', False)))
    return PurePursuitTracker(path, _subset(PursuitConfig, params), vehicle.kappa_max)


def _region(params: Mapping[str, Any]) -> GoalRegion:
    if 'centerline' not in params:
        raise ValueError("'centerline' (waypoint CSV) is required")
    centerline = load_waypoints(params['centerline'], closed=bool(params.get('closed', True)))
    return GoalRegion(centerline, tuple(params.get('longitudinal', (1.5, 2.0, 2.5))),
                      tuple(params.get('lateral', (-0.4, -0.2, 0.0, 0.2, 0.4))))


@dataclass(frozen=True)
class BuildContext:
    vehicle_id: int
    vehicle: VehicleParams
    control_dt: float  # planner period
    endpoint: Any = None
    zone: Optional[ConflictZone] = None
    roster: Sequence[int] = ()


def _build_ftg(params, ctx: BuildContext) -> Planner:
    goal_path = None
    if 'goal_path' in params:
        goal_path = load_waypoints(params['goal_path'], closed=bool(params.get('closed', False)))
    return FtgPlanner(_subset(FtgConfig, params), ctx.vehicle.kappa_max, goal_path,
                      float(params.get('lookahead', 1.5)))


def _build_pursuit(params, ctx: BuildContext) -> Planner:
    return PursuitPlanner(_pursuit_tracker(params, ctx.vehicle))


def _build_lattice(params, ctx: BuildContext) -> Planner:
    opts = LatticeOptions(
        bvp=BvpOptions(**params.get('bvp', {})),
        vehicle=ctx.vehicle,
        control_dt=ctx.control_dt,
        margin=float(params.get('margin', 0.05)),
        kappa_goal=float(params.get('kappa_goal', 0.0)),
        workers=int(params.get('workers', config.lattice_workers)),
    )
    return LatticePlanner(_region(params), CostWeights(**params.get('weights', {})), opts)


def _build_rbf(params, ctx: BuildContext) -> Planner:
    if 'network' not in params:
        raise ValueError("'network' (trained network file) is required")
    return RbfPlanner(load_network(params['network']), _region(params),
                      CostWeights(**params.get('weights', {})), ctx.vehicle, ctx.control_dt,
                      float(params.get('margin', 0.05)), int(params.get('n_steps', 64)))


def _build_roundabout(params, ctx: BuildContext) -> Planner:
    if ctx.endpoint is None or ctx.zone is None:
        raise ValueError("roundabout planner needs a V2V endpoint and a conflict zone")
    controller = RoundaboutController(
        ctx.vehicle_id, _pursuit_tracker(params, ctx.vehicle), ctx.zone, ctx.roster,
        float(params.get('stop_margin', 0.2)), float(params.get('stop_decel', 2.0)))
    return RoundaboutPlanner(controller, ctx.endpoint)


PLANNERS: Dict[str, Callable[[Mapping[str, Any], BuildContext], Planner]] = {
    'ftg': _build_ftg,
    'pursuit': _build_pursuit,
    'lattice': _build_lattice,
    'rbf': _build_rbf,
    'roundabout': _build_roundabout,
}


def build_planner(name: str, params: Mapping[str, Any], ctx: BuildContext) -> Planner:
    """Instantiate a registered planner; bad parameters surface as ConfigError"""
    if name not in PLANNERS:
        raise ConfigError([f"planner: unknown planner {name!r}"])
    try:
        planner = PLANNERS[name](params, ctx)
    except (TypeError, ValueError, OSError) as e:
        raise ConfigError([f"vehicle {ctx.vehicle_id}.planner_params: {e}"])
    logger.debug(f"Vehicle {ctx.vehicle_id}: {name} planner ready")
    return planner
