"""
Episode plots: map outline, per-vehicle trajectories and collision markers as SVG
"""

import logging
from pathlib import Path
from typing import Optional

import cv2
import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import OccupancyGrid  # noqa: E402
from .errors import MissingLog  # noqa: E402
from .scenario import LapLine  # noqa: E402
from .sim import read_episode_log  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed ids and no timestamp so identical inputs give identical files
matplotlib.rcParams['svg.hashsalt'] = 'racestack'


def map_outline(grid: OccupancyGrid):
    """Occupied-region boundaries as world-frame (N, 2) polylines"""
    mask = grid.occupied.astype(np.uint8)
    contours, _ = cv2.findContours(mask, cv2.RETR_LIST, cv2.CHAIN_APPROX_SIMPLE)
    c = np.cos(grid.origin.theta)
    s = np.sin(grid.origin.theta)
    lines = []
    for contour in contours:
        pts = contour.reshape(-1, 2).astype(float)
        lx = (pts[:, 0] + 0.5) * grid.resolution
        ly = (pts[:, 1] + 0.5) * grid.resolution
        wx = grid.origin.x + c * lx - s * ly
        wy = grid.origin.y + s * lx + c * ly
        lines.append(np.column_stack([np.append(wx, wx[0]), np.append(wy, wy[0])]))
    return lines


def emit_plot(episode_csv, grid: OccupancyGrid, out_svg, lap_line: Optional[LapLine] = None):
    episode_csv = Path(episode_csv)
    if not episode_csv.exists():
        raise MissingLog(f"Episode log not found: {episode_csv}")
    tracks = read_episode_log(episode_csv)

    fig, ax = plt.subplots(figsize=(8, 8))
    for line in map_outline(grid):
        ax.plot(line[:, 0], line[:, 1], color='black', linewidth=0.8, gid='map')

    if lap_line is not None:
        ax.plot([lap_line.x0, lap_line.x1], [lap_line.y0, lap_line.y1], color='tab:green',
                linestyle='--', linewidth=1.2, gid='lap-line')

    colors = plt.get_cmap('tab10')
    for i, (vehicle_id, track) in enumerate(sorted(tracks.items())):
        color = colors(i % 10)
        ax.plot(track['x'], track['y'], color=color, linewidth=1.2,
                label=f"vehicle {vehicle_id}", gid=f"vehicle-{vehicle_id}")
        hits = np.flatnonzero(track['collision_flag'])
        if hits.size:
            ax.plot(track['x'][hits], track['y'][hits], linestyle='none', marker='x',
                    markersize=9, color='red', gid=f"collision-{vehicle_id}")

    ax.set_aspect('equal')
    ax.set_xlabel('x [m]')
    ax.set_ylabel('y [m]')
    ax.grid(True, linewidth=0.3)
    if tracks:
        ax.legend(loc='upper right')

    out_svg = Path(out_svg)
    out_svg.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_svg, format='svg', metadata={'Date': None})
    plt.close(fig)
    logger.info(f"Plot written to {out_svg} ({len(tracks)} vehicle track(s))")
    return out_svg
