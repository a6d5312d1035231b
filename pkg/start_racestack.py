#!/usr/bin/env python3
"""Main entry point for racestack"""

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

# Add the project root to Python path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from racestack.config import config  # noqa: E402
from racestack.core import load_map_from_metadata  # noqa: E402
from racestack.errors import ConfigError, MapLoadError, RaceStackError  # noqa: E402

logger = logging.getLogger('racestack')

# Exit codes: problems with the inputs vs failures while running
EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def setup_logging(level=None):
    """Configure root logging from [Logging] settings, optionally overriding the level"""
    handlers = [logging.StreamHandler(sys.stdout)]
    if config.log_file:
        handlers.append(logging.FileHandler(config.log_file))
    logging.basicConfig(
        level=getattr(logging, (level or config.log_level).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )
    # Reduce werkzeug (Flask) logging verbosity
    logging.getLogger('werkzeug').setLevel(logging.WARNING)


def cmd_run(args):
    from racestack.runner import run_scenario
    from racestack.scenario import load_scenario

    scenario = load_scenario(args.config, seed=args.seed, duration=args.duration)
    summary = run_scenario(scenario, args.output)
    logger.info(f"Episode log: {summary.episode_log}")
    logger.info(f"Summary: {summary.summary_path}")
    return EXIT_OK


def cmd_plot(args):
    from racestack.plotting import emit_plot
    from racestack.scenario import LapLine

    grid = load_map_from_metadata(args.map)
    lap_line = LapLine(*args.lap_line) if args.lap_line else None
    emit_plot(args.log, grid, args.out, lap_line)
    return EXIT_OK


def cmd_rbf_train(args):
    from racestack.runner import load_rbf_config, rbf_pipeline

    cfg = load_rbf_config(args.config, seed=args.seed)
    artifacts = rbf_pipeline(cfg, args.output)
    logger.info(f"Network: {artifacts.network_path}")
    logger.info(f"Report: {artifacts.report_path}")
    return EXIT_OK


def cmd_make_track(args):
    from racestack.tracks import TRACKS

    files = TRACKS[args.kind](args.directory, resolution=args.resolution)
    for role, path in sorted(files.items()):
        logger.info(f"{role}: {path}")
    return EXIT_OK


def cmd_serve_v2v(args):
    from racestack.v2v import V2VServer

    server = V2VServer(args.host, args.port)
    stop = threading.Event()

    def signal_handler(signum, frame):
        logger.info(f"Received signal {signum}, shutting down...")
        stop.set()

    signal.signal(signal.SIGINT, signal_handler)
    signal.signal(signal.SIGTERM, signal_handler)
    server.start()
    try:
        stop.wait()
    finally:
        server.stop()
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        description='🏎️ racestack: deterministic 2D autonomous racing stack',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Example usage:
   racestack make-track oval tracks/oval
   racestack run tracks/oval/oval.json --duration 60
   racestack plot runs/oval/episode.csv tracks/oval/oval.yaml runs/oval/oval.svg
   racestack rbf-train rbf.json
        """)
    parser.add_argument('--log-level', type=str, default=None,
                        help='Override [Logging] level (DEBUG, INFO, WARNING, ...)')
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='Run a scenario and write episode log + summary')
    run.add_argument('config', help='Scenario JSON file')
    run.add_argument('--seed', type=int, default=None, help='Override the scenario seed')
    run.add_argument('--duration', type=float, default=None, help='Override duration (s)')
    run.add_argument('--output', type=str, default=None,
                     help='Output directory (default: <output_dir>/<scenario name>)')
    run.set_defaults(func=cmd_run)

    plot = sub.add_parser('plot', help='Render an episode log as SVG')
    plot.add_argument('log', help='Episode CSV')
    plot.add_argument('map', help='Map metadata file (image resolved from it)')
    plot.add_argument('out', help='Output SVG path')
    plot.add_argument('--lap-line', type=float, nargs=4, metavar=('X0', 'Y0', 'X1', 'Y1'),
                      default=None, help='Draw the start/finish segment')
    plot.set_defaults(func=cmd_plot)

    rbf = sub.add_parser('rbf-train', help='Train and evaluate the RBF trajectory approximator')
    rbf.add_argument('config', help='RBF pipeline JSON file')
    rbf.add_argument('--seed', type=int, default=None, help='Override the pipeline seed')
    rbf.add_argument('--output', type=str, default=None, help='Output directory')
    rbf.set_defaults(func=cmd_rbf_train)

    track = sub.add_parser('make-track', help='Generate a track map, paths and scenario')
    track.add_argument('kind', choices=['oval', 'corridor', 'roundabout'])
    track.add_argument('directory', help='Directory to write into')
    track.add_argument('--resolution', type=float, default=None, help='Meters per cell')
    track.set_defaults(func=cmd_make_track)

    serve = sub.add_parser('serve-v2v', help='Run a standalone V2V push/pull server')
    serve.add_argument('--host', type=str, default=None)
    serve.add_argument('--port', type=int, default=None)
    serve.set_defaults(func=cmd_serve_v2v)
    return parser


def main(argv=None):
    """Main application entry point"""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    try:
        config.validate()
        return args.func(args)
    except (ConfigError, MapLoadError) as e:
        logger.error(f"❌ {e}")
        return EXIT_CONFIG
    except RaceStackError as e:
        logger.error(f"💥 {type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
