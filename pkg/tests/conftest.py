import numpy as np
import pytest

from podinv.forward import TimeGrid
from podinv.mesh_fem import Field, assemble_operators, build_mesh
from podinv.pod import reduce_operators, pod_from_snapshots, snapshots_from_sources
from podinv.sensors import make_sensor_grid
from podinv.sources import letter_source

LETTERS = "ABCDEFGHIJKLMNO"

_acceptance_lines = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        _acceptance_lines.extend(v for k, v in report.user_properties if k == "acceptance")


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def sine_mode(mesh):
    return Field.interpolate(lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y), mesh)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small():
    """n_div = 4 problem with a short horizon, well conditioned enough for dense oracles."""
    mesh = build_mesh(4)
    ops = assemble_operators(mesh)
    grid = TimeGrid.from_step(0.04, 0.01)
    sensors = make_sensor_grid(6)
    return mesh, ops, grid, sensors


@pytest.fixture(scope="session")
def letters():
    """Letters A-O pipeline at h = dt = 1/32 with 100 x 100 sensors."""
    mesh = build_mesh(32)
    ops = assemble_operators(mesh)
    grid = TimeGrid.from_step(1.0, 1.0 / 32)
    sensors = make_sensor_grid(100)
    sources = {ch: letter_source(ch, mesh) for ch in LETTERS}
    snaps = snapshots_from_sources(ops, list(sources.values()), grid)
    basis = pod_from_snapshots(snaps, 1e-4)
    red = reduce_operators(basis, ops, sensors)
    return dict(mesh=mesh, ops=ops, grid=grid, sensors=sensors, sources=sources, snaps=snaps, basis=basis, red=red)
