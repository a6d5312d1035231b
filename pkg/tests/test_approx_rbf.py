"""Tests for the RBF approximation of the lattice solver"""

import time

import numpy as np
import pytest

from racestack.approx_rbf import (
    GoalLattice, TrainingSet, build_training_set, infer, infer_batch, load_network,
    save_network, test_error as endpoint_test_error, train_rbf,
)
from racestack.core import Pose2D, VehicleState
from racestack.errors import InsufficientData, SingularKernel, Untrained
from racestack.plan_lattice import BvpOptions

ZERO = VehicleState(Pose2D())
SYMMETRIC = GoalLattice(x_range=(1.5, 4.0), y_range=(-1.0, 1.0), heading_range=(-0.3, 0.3),
                        x_count=5, y_count=5, heading_count=3)


@pytest.fixture(scope='module')
def symmetric_set():
    return build_training_set(ZERO, SYMMETRIC)


@pytest.fixture(scope='module')
def symmetric_net(symmetric_set):
    return train_rbf(symmetric_set)


def test_lattice_order_and_midpoints():
    lattice = GoalLattice(x_count=2, y_count=3, heading_count=1, heading_range=(0.0, 0.0))
    goals = lattice.goals()
    assert goals.shape == (6, 3)
    assert goals[0].tolist() == [1.5, -1.0, 0.0]
    assert goals[1].tolist() == [1.5, 0.0, 0.0]
    assert lattice.midpoints().shape == (1 * 2 * 1, 3)


def test_easy_forward_goals_converge():
    lattice = GoalLattice(x_range=(2.0, 4.0), y_range=(-0.5, 0.5), heading_range=(0.0, 0.0),
                          x_count=5, y_count=5, heading_count=1)
    first = build_training_set(ZERO, lattice)
    assert len(first) >= 24
    second = build_training_set(ZERO, lattice)
    assert np.array_equal(first.goals, second.goals)
    assert np.array_equal(first.targets, second.targets)


def test_goals_behind_vehicle():
    behind = GoalLattice(x_range=(-3.0, -1.0), x_count=3, y_count=3, heading_count=1)
    with pytest.raises(InsufficientData):
        build_training_set(ZERO, behind)


def test_training_points_are_interpolated_exactly(symmetric_net, symmetric_set):
    assert symmetric_net.training_residual < 1e-6
    predicted = infer_batch(symmetric_net, symmetric_net.centers)
    targets = symmetric_set.targets
    scale = np.maximum(np.abs(targets), 1.0)
    assert np.max(np.abs(predicted[:, [0, 2, 3, 4]] - targets) / scale) < 1e-6
    assert np.all(predicted[:, 1] == 0.0)


def test_single_center():
    dataset = TrainingSet(np.array([[2.0, 0.5, 0.1]]), np.array([[2.2, 0.3, -0.1, 0.0]]), 0.0, 0)
    net = train_rbf(dataset)
    p = infer(net, Pose2D(2.0, 0.5, 0.1))
    assert (p.s, p.b, p.c, p.d) == pytest.approx((2.2, 0.3, -0.1, 0.0))


def test_duplicate_inputs_rejected():
    goals = np.array([[2.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    dataset = TrainingSet(goals, np.ones((3, 4)), 0.0, 0)
    with pytest.raises(SingularKernel):
        train_rbf(dataset)


def test_untrained():
    with pytest.raises(Untrained):
        infer(None, Pose2D(2.0, 0.0, 0.0))


def test_mirror_symmetry(symmetric_net):
    p = infer(symmetric_net, Pose2D(2.3, 0.37, 0.11))
    q = infer(symmetric_net, Pose2D(2.3, -0.37, -0.11))
    assert q.s == pytest.approx(p.s, abs=5e-3)
    assert q.a == p.a
    assert (q.b, q.c, q.d) == pytest.approx((-p.b, -p.c, -p.d), abs=5e-3)


def test_error_on_training_goals_is_tiny():
    tight = BvpOptions(pos_tol=1e-8, heading_tol=1e-8)
    lattice = GoalLattice(x_range=(2.0, 3.0), y_range=(-0.5, 0.5), heading_range=(0.0, 0.0),
                          x_count=3, y_count=3, heading_count=1)
    net = train_rbf(build_training_set(ZERO, lattice, tight))
    report = endpoint_test_error(net, net.centers, tight)
    assert report.worst < 1e-5
    assert report.count == len(net.centers)


def test_error_on_empty_set(symmetric_net):
    assert endpoint_test_error(symmetric_net, []).worst == 0.0


def test_batch_inference_throughput(symmetric_net):
    goals = np.random.default_rng(1).uniform([1.5, -1.0, -0.3], [4.0, 1.0, 0.3], size=(20_000, 3))
    start = time.perf_counter()
    infer_batch(symmetric_net, goals)
    elapsed = time.perf_counter() - start
    assert len(goals) / elapsed >= 1e4


def test_saved_network_loads_bit_exact(symmetric_net, tmp_path):
    save_network(symmetric_net, tmp_path / 'net.rsrbf')
    loaded = load_network(tmp_path / 'net.rsrbf')
    for name in ('centers', 'weights', 'in_center', 'in_scale', 'out_mean', 'out_scale'):
        assert np.array_equal(getattr(loaded, name), getattr(symmetric_net, name))
    assert loaded.epsilon == symmetric_net.epsilon
    goals = symmetric_net.centers[:5] + 0.01
    assert np.array_equal(infer_batch(loaded, goals), infer_batch(symmetric_net, goals))


def test_load_rejects_foreign_file(tmp_path):
    (tmp_path / 'bogus.rsrbf').write_bytes(b'not a network')
    with pytest.raises(ValueError):
        load_network(tmp_path / 'bogus.rsrbf')


@pytest.mark.slow
def test_midpoint_error_on_default_lattice():
    lattice = GoalLattice()
    net = train_rbf(build_training_set(ZERO, lattice))
    report = endpoint_test_error(net, lattice.midpoints(), extent=lattice.extent)
    assert report.worst <= 0.02


@pytest.mark.slow
def test_denser_lattice_does_not_get_worse():
    midpoints = GoalLattice(x_count=9, y_count=9, heading_count=3).midpoints()

    def worst(count):
        lattice = GoalLattice(x_count=count, y_count=count, heading_count=3)
        net = train_rbf(build_training_set(ZERO, lattice))
        return endpoint_test_error(net, midpoints, extent=lattice.extent).worst

    assert worst(9) <= 1.2 * worst(5)
