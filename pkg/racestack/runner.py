"""
Scenario runner

Wires map, vehicles, planners, optional localization, V2V and monitors into a
closed loop stepped at the scenario dt. All randomness derives from the
scenario seed and all timestamps are simulation time, so identical inputs
give byte-identical episode logs and summaries.
"""

import contextlib
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .approx_rbf import (
    GoalLattice,
    ErrorReport,
    RbfNetwork,
    TrainingSet,
    build_training_set,
    infer,
    infer_batch,
    save_network,
    test_error,
    train_rbf,
)
from .config import config
from .core import ControlCommand, Pose2D, VehicleState, compose_pose, load_map
from .errors import ConfigError
from .localize import Localizer
from .monitor import MonitorKind, ViolationLog, apply_failsafe, check
from .planners import BuildContext, PlannerContext, build_planner
from .plan_lattice import BvpOptions
from .scenario import LapLine, ScenarioConfig
from .sim import (
    CollisionEvent,
    EpisodeLog,
    OdometryDelta,
    make_world,
    odometry,
    sense,
    step_world,
)
from .v2v import LoopbackBus, Mailbox, V2VClient, V2VServer

logger = logging.getLogger(__name__)

SUMMARY_VERSION = 1
EPISODE_FILE = 'episode.csv'
VIOLATIONS_FILE = 'violations.csv'
SUMMARY_FILE = 'summary.json'


@dataclass
class LapCounter:
    line: LapLine
    armed_at: Optional[float] = None
    lap_times: List[float] = field(default_factory=list)

    @property
    def laps(self) -> int:
        return len(self.lap_times)

    def update(self, prev: Pose2D, new: Pose2D, now: float) -> bool:
        """True when this step completed a lap; the first crossing only starts the clock"""
        if not self.line.crossed_forward(prev, new):
            return False
        if self.armed_at is None:
            self.armed_at = now
            return False
        self.lap_times.append(now - self.armed_at)
        self.armed_at = now
        return True


@dataclass
class ExitSummary:
    laps: Dict[int, int]
    lap_times: Dict[int, List[float]]
    collisions: List[CollisionEvent]
    violations: int
    episode_log: Path
    violations_log: Path
    summary_path: Path

    @property
    def collided(self) -> bool:
        return bool(self.collisions)


class _VehicleRuntime:
    def __init__(self, vehicle_cfg, planner, period: int, sense_rng, localizer=None):
        self.cfg = vehicle_cfg
        self.planner = planner
        self.period = period
        self.sense_rng = sense_rng
        self.localizer = localizer
        self.odom = Pose2D()
        self.odom_v = 0.0
        self.estimate: Optional[Pose2D] = None
        self.distance = 0.0

    def accumulate(self, delta) -> None:
        self.odom = compose_pose(self.odom, Pose2D(delta.dx, delta.dy, delta.dtheta))
        self.odom_v = delta.v

    def take_odometry(self):
        delta = OdometryDelta(self.odom.x, self.odom.y, self.odom.theta, self.odom_v)
        self.odom = Pose2D()
        return delta


def _round(value: float) -> float:
    return round(float(value), 6)


@contextlib.contextmanager
def v2v_endpoints(scenario: ScenarioConfig, rng: np.random.Generator):
    """Per-vehicle endpoints: one shared loopback bus, or TCP clients of one local server"""
    settings = scenario.v2v
    ids = [v.id for v in scenario.vehicles]
    if not settings.enabled:
        yield {vid: None for vid in ids}
        return
    if settings.transport == 'loopback':
        bus = LoopbackBus(settings.staleness_window, settings.loss, settings.latency,
                          settings.blackout, rng)
        yield {vid: bus for vid in ids}
        return
    server = V2VServer(settings.host, settings.port, Mailbox(settings.staleness_window))
    server.start()
    clients = {vid: V2VClient(server.url, settings.timeout) for vid in ids}
    try:
        yield clients
    finally:
        for client in clients.values():
            client.close()
        server.stop()


def _summary_document(scenario: ScenarioConfig, runtimes, counters, collisions,
                      violation_count: int, world) -> dict:
    vehicles = {}
    collided = {vid for event in collisions for vid in event.vehicle_ids}
    for vid, runtime in runtimes.items():
        counter = counters.get(vid)
        pose = world.state(vid).pose
        vehicles[str(vid)] = {
            'planner': runtime.cfg.planner,
            'laps': counter.laps if counter else 0,
            'lap_times': [_round(t) for t in counter.lap_times] if counter else [],
            'collided': vid in collided,
            'distance': _round(runtime.distance),
            'final_pose': [_round(pose.x), _round(pose.y), _round(pose.theta)],
        }
    return {
        'version': SUMMARY_VERSION,
        'scenario': scenario.name,
        'seed': scenario.seed,
        'duration': scenario.duration,
        'dt': scenario.dt,
        'steps': scenario.steps,
        'vehicles': vehicles,
        'collisions': [{'time': _round(e.time), 'vehicles': list(e.vehicle_ids), 'kind': e.kind}
                       for e in collisions],
        'violations': violation_count,
        'logs': {'episode': EPISODE_FILE, 'violations': VIOLATIONS_FILE},
    }


def run_scenario(scenario: ScenarioConfig, output_dir=None) -> ExitSummary:
    out = Path(output_dir) if output_dir else Path(config.output_dir) / scenario.name
    out.mkdir(parents=True, exist_ok=True)
    grid = load_map(scenario.map_image, scenario.map_metadata)
    dt = scenario.dt

    seeds = np.random.SeedSequence(scenario.seed).spawn(1 + 2 * len(scenario.vehicles))
    world = make_world(
        grid,
        [(v.id, VehicleState(v.start, min(v.speed, v.params.v_max), 0.0), v.params)
         for v in scenario.vehicles],
        scenario.seed)
    counters = ({v.id: LapCounter(scenario.lap_line) for v in scenario.vehicles}
                if scenario.lap_line else {})
    watch_clearance = any(m.kind == MonitorKind.MIN_CLEARANCE for m in scenario.monitors)
    with_estimates = any(v.localization is not None for v in scenario.vehicles)
    roster = tuple(v.id for v in scenario.vehicles)

    logger.info(f"🚀 Running scenario '{scenario.name}': {len(scenario.vehicles)} vehicle(s), "
                f"{scenario.duration}s at dt={dt}, seed {scenario.seed}")

    collisions: List[CollisionEvent] = []
    runtimes: Dict[int, _VehicleRuntime] = {}
    with contextlib.ExitStack() as stack:
        endpoints = stack.enter_context(
            v2v_endpoints(scenario, np.random.default_rng(seeds[0])))
        # Ascending id order: lower ids plan and publish first within a step
        for i, vc in sorted(enumerate(scenario.vehicles), key=lambda item: item[1].id):
            period = max(1, int(round(1.0 / (vc.planner_rate * dt))))
            planner = build_planner(vc.planner, vc.planner_params, BuildContext(
                vc.id, vc.params, period * dt, endpoints[vc.id], scenario.v2v.zone, roster))
            stack.callback(planner.close)
            localizer = None
            if vc.localization is not None:
                localizer = Localizer(grid, vc.localization, scenario.noise,
                                      np.random.default_rng(seeds[2 + 2 * i]), vc.start)
            runtimes[vc.id] = _VehicleRuntime(vc, planner, period,
                                              np.random.default_rng(seeds[1 + 2 * i]), localizer)

        episode = stack.enter_context(EpisodeLog(out / EPISODE_FILE, with_estimates))
        violation_log = stack.enter_context(ViolationLog(out / VIOLATIONS_FILE))

        for k in range(scenario.steps):
            commands: Dict[int, ControlCommand] = {}
            scans = {}
            for vid, rt in runtimes.items():
                if vid in world.frozen or k % rt.period:
                    continue
                state = world.state(vid)
                scan = None
                if rt.planner.needs_scan or rt.localizer is not None or watch_clearance:
                    scan = sense(world, vid, scenario.scan, scenario.noise, rt.sense_rng)
                    scans[vid] = scan
                if rt.localizer is not None:
                    rt.estimate = rt.localizer.step(rt.take_odometry(), scan)
                    state = state.with_pose(rt.estimate)
                cmd = rt.planner.plan(PlannerContext(world.time, vid, state, world, scan))
                commands[vid] = cmd.clamped(rt.cfg.params.kappa_max, rt.cfg.params.v_max)

            violations = check(scenario.monitors, world, scans)
            if violations:
                for vid in {v.vehicle_id for v in violations}:
                    held = commands.get(vid) or world.last_commands.get(vid) or ControlCommand()
                    commands[vid] = apply_failsafe(held, violations, vid)
                violation_log.write(violations)

            prev = world
            world, events = step_world(world, commands, dt)
            collisions.extend(events)

            for vid, rt in runtimes.items():
                before = prev.state(vid)
                after = world.state(vid)
                rt.distance += math.hypot(after.pose.x - before.pose.x,
                                          after.pose.y - before.pose.y)
                if rt.localizer is not None:
                    rt.accumulate(odometry(before, after, scenario.noise, rt.sense_rng))
                counter = counters.get(vid)
                if counter and counter.update(before.pose, after.pose, world.time):
                    logger.info(f"🏁 Vehicle {vid} completed lap {counter.laps} in "
                                f"{counter.lap_times[-1]:.2f}s")

            collided = {vid for event in events for vid in event.vehicle_ids}
            estimates = {vid: rt.estimate for vid, rt in runtimes.items()
                         if rt.estimate is not None}
            episode.write_step(world, commands, collided, estimates)
        violation_count = violation_log.count

    summary_path = out / SUMMARY_FILE
    document = _summary_document(scenario, runtimes, counters, collisions, violation_count, world)
    summary_path.write_text(json.dumps(document, indent=2, sort_keys=True) + '\n')

    laps = {vid: (counters[vid].laps if vid in counters else 0) for vid in runtimes}
    logger.info(f"✅ Scenario '{scenario.name}' finished: laps {laps}, "
                f"{len(collisions)} collision(s), {violation_count} violation(s)")
    return ExitSummary(
        laps=laps,
        lap_times={vid: list(counters[vid].lap_times) if vid in counters else []
                   for vid in runtimes},
        collisions=collisions,
        violations=violation_count,
        episode_log=out / EPISODE_FILE,
        violations_log=out / VIOLATIONS_FILE,
        summary_path=summary_path,
    )


# ---------------------------------------------------------------------------
# Offline RBF pipeline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RbfPipelineConfig:
    lattice: GoalLattice = GoalLattice()
    bvp: BvpOptions = BvpOptions()
    kappa0: float = 0.0
    kappa_goal: float = 0.0
    epsilon: Optional[float] = None
    seed: int = 0
    throughput_samples: int = 10000
    name: str = 'rbf'


@dataclass
class RbfArtifacts:
    dataset: TrainingSet
    network: RbfNetwork
    error: ErrorReport
    batch_rate: float  # inferences per second, one batched call
    single_rate: float  # inferences per second, one call per goal
    dataset_path: Path
    network_path: Path
    report_path: Path


def _write_dataset(dataset: TrainingSet, path: Path) -> None:
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['goal_x', 'goal_y', 'goal_heading', 's', 'b', 'c', 'd'])
        for goal, target in zip(dataset.goals, dataset.targets):
            writer.writerow([repr(float(v)) for v in (*goal, *target)])


def _measure_throughput(net: RbfNetwork, lattice: GoalLattice, samples: int, seed: int):
    rng = np.random.default_rng(seed)
    lows = [lattice.x_range[0], lattice.y_range[0], lattice.heading_range[0]]
    highs = [lattice.x_range[1], lattice.y_range[1], lattice.heading_range[1]]
    goals = rng.uniform(lows, highs, size=(samples, 3))

    start = time.perf_counter()
    infer_batch(net, goals)
    batch_rate = samples / max(time.perf_counter() - start, 1e-9)

    singles = goals[:min(samples, 1000)]
    start = time.perf_counter()
    for g in singles:
        infer(net, g)
    single_rate = len(singles) / max(time.perf_counter() - start, 1e-9)
    return batch_rate, single_rate


def rbf_pipeline(cfg: RbfPipelineConfig, output_dir=None) -> RbfArtifacts:
    """Sample, solve, train, evaluate and persist a goal-to-spline network"""
    out = Path(output_dir) if output_dir else Path(config.output_dir) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    x0 = VehicleState(Pose2D(), 0.0, cfg.kappa0)

    logger.info(f"Building RBF training set on a {cfg.lattice.x_count}x{cfg.lattice.y_count}x"
                f"{cfg.lattice.heading_count} goal lattice")
    dataset = build_training_set(x0, cfg.lattice, cfg.bvp, cfg.kappa_goal)
    network = train_rbf(dataset, cfg.epsilon)
    report = test_error(network, cfg.lattice.midpoints(), cfg.bvp, cfg.lattice.extent, x0)
    batch_rate, single_rate = _measure_throughput(network, cfg.lattice, cfg.throughput_samples,
                                                  cfg.seed)

    dataset_path = out / 'dataset.csv'
    network_path = out / 'network.rsrbf'
    report_path = out / 'report.txt'
    _write_dataset(dataset, dataset_path)
    save_network(network, network_path)
    report_path.write_text(
        f"training pairs (M): {len(dataset)}\n"
        f"failed goals: {dataset.failures}\n"
        f"epsilon: {network.epsilon:.6g}\n"
        f"training residual: {network.training_residual:.3e}\n"
        f"jitter: {network.jitter:.1e}\n"
        f"test goals: {report.count}\n"
        f"worst-case test error: {report.worst:.6f}\n"
        f"mean test error: {report.mean:.6f}\n"
        f"inference throughput (batched): {batch_rate:.0f} /s\n"
        f"inference throughput (single): {single_rate:.0f} /s\n"
    )
    logger.info(f"✅ RBF pipeline done: worst test error {report.worst:.4%}, "
                f"{batch_rate:.0f} inferences/s batched")
    return RbfArtifacts(dataset, network, report, batch_rate, single_rate,
                        dataset_path, network_path, report_path)


def load_rbf_config(path, seed: Optional[int] = None) -> RbfPipelineConfig:
    """JSON with optional keys lattice, bvp, kappa0, kappa_goal, epsilon, seed,
    throughput_samples, name; unknown keys are rejected"""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"{path}: config file not found"])
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}: invalid JSON ({e})"])
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: expected a JSON object"])
    if seed is not None:
        data['seed'] = seed

    errors = []
    allowed = {f.name for f in fields(RbfPipelineConfig)}
    errors.extend(f"{key}: unknown key" for key in sorted(set(data) - allowed))
    values = {k: v for k, v in data.items() if k in allowed and k not in ('lattice', 'bvp')}
    for key, cls in (('lattice', GoalLattice), ('bvp', BvpOptions)):
        section = data.get(key, {})
        if not isinstance(section, dict):
            errors.append(f"{key}: expected an object")
            continue
        unknown = sorted(set(section) - {f.name for f in fields(cls)})
        errors.extend(f"{key}.{name}: unknown key" for name in unknown)
        if unknown:
            continue
        section = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
        try:
            values[key] = cls(**section)
        except (TypeError, ValueError) as e:
            errors.append(f"{key}: {e}")
    if errors:
        raise ConfigError(errors)
    try:
        return RbfPipelineConfig(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError([str(e)])
