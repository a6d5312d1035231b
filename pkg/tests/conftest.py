"""Shared fixtures for the racestack test suite"""

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

# Add the project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from racestack.core import OccupancyGrid, Pose2D  # noqa: E402
from racestack.v2v import Mailbox, create_v2v_app  # noqa: E402

settings.register_profile('fast', max_examples=60, deadline=None)
settings.load_profile('fast')


def make_box_grid(width_m, height_m, resolution=0.05, origin=(0.0, 0.0), wall=True):
    """Free rectangle with a one-cell occupied border"""
    cols = int(round(width_m / resolution))
    rows = int(round(height_m / resolution))
    cells = np.zeros((rows, cols))
    if wall:
        cells[0, :] = cells[-1, :] = 1.0
        cells[:, 0] = cells[:, -1] = 1.0
    return OccupancyGrid(cells, resolution, Pose2D(origin[0], origin[1], 0.0))


@pytest.fixture
def empty_grid():
    """10 m x 10 m free grid centered on the world origin, no walls"""
    return make_box_grid(10.0, 10.0, 0.05, origin=(-5.0, -5.0), wall=False)


@pytest.fixture
def box_grid():
    """6 m x 4 m walled room with its lower-left corner at (-3, -2)"""
    return make_box_grid(6.0, 4.0, 0.05, origin=(-3.0, -2.0))


@pytest.fixture
def asymmetric_room():
    """Small L-shaped room with a pillar; no rotational or mirror symmetry"""
    res = 0.1
    cells = np.zeros((30, 36))
    cells[0, :] = cells[-1, :] = 1.0
    cells[:, 0] = cells[:, -1] = 1.0
    cells[20:, 26:] = 1.0  # notch in the upper right
    cells[6:10, 8:11] = 1.0  # pillar
    cells[22:24, 4:14] = 1.0  # shelf
    return OccupancyGrid(cells, res, Pose2D(0.0, 0.0, 0.0))


@pytest.fixture
def mailbox():
    return Mailbox(staleness_window=0.5)


@pytest.fixture
def app(mailbox):
    app = create_v2v_app(mailbox)
    app.config['TESTING'] = True
    return app
