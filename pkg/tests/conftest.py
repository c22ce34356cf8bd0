"""
Shared pytest fixtures for scad tests.
"""

import pytest
import tempfile
from pathlib import Path

from scad.experiment import build_report
from scad.heft import schedule_heft
from scad.models import (
    CPU, DLA, GPU, Dag, Edge, ExperimentPlan, Platform, Policy, PolicyConfig, Processor, TaskNode,
)
from scad.simulator import simulate


def make_node(task_id, costs, category='Perception3D', period=None, threads=1, **kwargs):
    """Task node eligible on every kind it has a cost for."""
    return TaskNode(
        id=task_id,
        name=task_id,
        category=category,
        cost_table=dict(costs),
        eligibility=frozenset(kwargs.pop('eligibility', costs)),
        expected_latency=kwargs.pop('deadline', 100.0),
        period=period,
        thread_count=threads,
        **kwargs,
    )


def cpu_platform(cores=1, watts=1.5, reserved=()):
    """CPU-only platform."""
    return Platform(
        processors=tuple(Processor(f"cpu{i}", CPU, 1.0, watts) for i in range(cores)),
        reserved=frozenset(reserved),
    )


@pytest.fixture
def temp_db_path():
    """Create a temporary database file path."""
    with tempfile.NamedTemporaryFile(suffix='.db', delete=False) as f:
        db_path = f.name

    yield db_path

    Path(db_path).unlink(missing_ok=True)


@pytest.fixture
def reference_platform():
    """Three processors of distinct kinds standing in for P1, P2, P3."""
    return Platform(processors=(
        Processor('p1', CPU, 1.0, 1.0),
        Processor('p2', GPU, 1.0, 1.0),
        Processor('p3', DLA, 1.0, 1.0),
    ))


@pytest.fixture
def reference_dag():
    """Classic 10-task / 3-processor HEFT instance (hand-traced makespan 80)."""
    costs = {
        'n1': (14, 16, 9),
        'n2': (13, 19, 18),
        'n3': (11, 13, 19),
        'n4': (13, 8, 17),
        'n5': (12, 13, 10),
        'n6': (13, 16, 9),
        'n7': (7, 15, 11),
        'n8': (5, 11, 14),
        'n9': (18, 12, 20),
        'n10': (21, 7, 16),
    }
    edges = [
        ('n1', 'n2', 18), ('n1', 'n3', 12), ('n1', 'n4', 9), ('n1', 'n5', 11), ('n1', 'n6', 14),
        ('n2', 'n8', 19), ('n2', 'n9', 16), ('n3', 'n7', 23), ('n4', 'n8', 27), ('n4', 'n9', 23),
        ('n5', 'n9', 13), ('n6', 'n8', 15), ('n7', 'n10', 17), ('n8', 'n10', 11), ('n9', 'n10', 13),
    ]
    nodes = [
        make_node(t, {CPU: c[0], GPU: c[1], DLA: c[2]}, period=100.0 if t == 'n1' else None)
        for t, c in costs.items()
    ]
    return Dag(
        nodes=tuple(nodes),
        edges=tuple(
            Edge(s, d, {'CPU-GPU': c, 'CPU-DLA': c, 'GPU-DLA': c}) for s, d, c in edges
        ),
    )


@pytest.fixture
def single_cpu():
    return cpu_platform(1)


@pytest.fixture
def accel_platform():
    """One CPU core, one GPU and two identical DLAs."""
    return Platform(processors=(
        Processor('cpu0', CPU, 1.0, 1.5),
        Processor('gpu0', GPU, 1.0, 30.0),
        Processor('dla0', DLA, 1.0, 1.0),
        Processor('dla1', DLA, 1.0, 1.0),
    ))


@pytest.fixture
def toy_accel_dag():
    """Camera feeding two detectors that may run on the GPU or either DLA."""
    nodes = [
        make_node('cam', {CPU: 1.0}, category='Sensing', period=100.0),
        make_node('det_a', {GPU: 10.0, DLA: 15.0}, category='Perception2D', group='det'),
        make_node('det_b', {GPU: 10.0, DLA: 15.0}, category='Perception2D', group='det'),
    ]
    edges = [Edge('cam', 'det_a'), Edge('cam', 'det_b')]
    return Dag(nodes=tuple(nodes), edges=tuple(edges))


@pytest.fixture
def sample_report(toy_accel_dag, accel_platform):
    """Report of a short noise-free run of the toy detector graph."""
    plan = ExperimentPlan(apps=['ADy608'], stages=['linux-ts'], horizon_ms=1000.0, seed=7)
    schedule = schedule_heft(toy_accel_dag, accel_platform)
    result = simulate(toy_accel_dag, accel_platform, schedule,
                      PolicyConfig(policy=Policy.TIME_SHARING, noise_sigma=0.0), 1000.0, seed=7)
    return build_report('ADy608', 'linux-ts', plan, toy_accel_dag, schedule, result)


# Markers for test categorization
def pytest_configure(config):
    """Configure custom pytest markers."""
    config.addinivalue_line("markers", "unit: Unit tests")
    config.addinivalue_line("markers", "integration: Integration tests")
    config.addinivalue_line("markers", "database: Database tests")
    config.addinivalue_line("markers", "slow: Slow-running tests")
