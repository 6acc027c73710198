import numpy as np
import pytest

from podinv.errors import IncompatibleOperandsError, InvalidArgumentError
from podinv.forward import TimeGrid, forward_map_full, solve_full, step_factor
from podinv.mesh_fem import Field, assemble_operators, build_mesh, evaluate_at_points, l2_norm
from podinv.sensors import SensorSet, make_sensor_grid

from conftest import sine_mode

LAM1 = 2 * np.pi**2


def heat_amplitude(t):
    """Amplitude of u(t) for the source sin(pi x1) sin(pi x2) and zero start."""
    return (1 - np.exp(-LAM1 * t)) / LAM1


@pytest.fixture(scope="module")
def ops32():
    return assemble_operators(build_mesh(32))


def test_time_grid():
    g = TimeGrid.from_step(1.0, 1 / 32)
    assert g.m == 32
    assert g.times[-1] == pytest.approx(1.0)
    with pytest.raises(InvalidArgumentError):
        TimeGrid.from_step(1.0, 0.3)
    with pytest.raises(InvalidArgumentError):
        TimeGrid.from_step(1.0, -0.1)


def test_zero_data_gives_zero_trajectory(ops32):
    mesh = ops32.mesh
    traj = solve_full(ops32, Field.zeros(mesh), Field.zeros(mesh), TimeGrid.from_step(1.0, 0.25))
    assert len(traj) == 5
    assert not np.any(traj.states)


def test_eigenfunction_source_matches_closed_form(ops32):
    mesh = ops32.mesh
    s = sine_mode(mesh)
    traj = solve_full(ops32, s, Field.zeros(mesh), TimeGrid.from_step(1.0, 1 / 32))
    exact = heat_amplitude(1.0) * s.coeffs
    assert np.abs(traj.final.coeffs - exact).max() < 5e-2


def test_eigenfunction_initial_value_decays(ops32):
    mesh = ops32.mesh
    g = sine_mode(mesh).with_dirichlet()
    traj = solve_full(ops32, Field.zeros(mesh), g, TimeGrid.from_step(0.5, 1 / 4096))  # keeps the time error below 1%
    ratio = l2_norm(traj.final) / l2_norm(g)
    assert ratio == pytest.approx(np.exp(-np.pi**2), rel=0.05)


def test_forward_map_center_value(ops32):
    mesh = ops32.mesh
    center = SensorSet(np.array([[0.5, 0.5]]))
    val = forward_map_full(ops32, sine_mode(mesh), Field.zeros(mesh), TimeGrid.from_step(1.0, 1 / 32), center)
    assert val[0] == pytest.approx(heat_amplitude(1.0), abs=5e-3)


def test_forward_map_is_composition(rng):
    ops = assemble_operators(build_mesh(8))
    grid = TimeGrid.from_step(0.5, 0.1)
    f = Field(rng.standard_normal(ops.mesh.n_nodes), ops.mesh)
    g = Field(rng.standard_normal(ops.mesh.n_nodes), ops.mesh).with_dirichlet()
    sensors = make_sensor_grid(7)
    direct = forward_map_full(ops, f, g, grid, sensors)
    composed = evaluate_at_points(solve_full(ops, f, g, grid).final, sensors.points)
    assert np.abs(direct - composed).max() == 0.0
    zero = forward_map_full(ops, Field.zeros(ops.mesh), Field.zeros(ops.mesh), grid, sensors)
    assert zero.shape == (49,) and not np.any(zero)


def test_linearity_in_source(rng):
    ops = assemble_operators(build_mesh(8))
    grid = TimeGrid.from_step(1.0, 0.125)
    z = Field.zeros(ops.mesh)
    f1 = Field(rng.standard_normal(ops.mesh.n_nodes), ops.mesh)
    f2 = Field(rng.standard_normal(ops.mesh.n_nodes), ops.mesh)
    lhs = solve_full(ops, Field(2.0 * f1.coeffs - 0.5 * f2.coeffs, ops.mesh), z, grid).states
    rhs = 2.0 * solve_full(ops, f1, z, grid).states - 0.5 * solve_full(ops, f2, z, grid).states
    assert np.abs(lhs - rhs).max() < 1e-10


@pytest.mark.parametrize("dt", [0.5, 0.05, 0.005])
def test_unconditional_stability(rng, dt):
    ops = assemble_operators(build_mesh(8), a=1.0, c=1.0)
    g = Field(rng.standard_normal(ops.mesh.n_nodes), ops.mesh).with_dirichlet()
    traj = solve_full(ops, Field.zeros(ops.mesh), g, TimeGrid.from_step(1.0, dt))
    norms = [l2_norm(traj.field(k)) for k in range(len(traj))]
    assert np.all(np.diff(norms) <= 1e-14)


def test_nonnegative_source_keeps_solution_nonnegative():
    ops = assemble_operators(build_mesh(16))
    f = Field((np.hypot(ops.mesh.nodes[:, 0] - 0.3, ops.mesh.nodes[:, 1] - 0.6) < 0.2).astype(float), ops.mesh)
    traj = solve_full(ops, f, Field.zeros(ops.mesh), TimeGrid.from_step(1.0, 1 / 16))
    assert traj.states.min() >= -1e-12


def test_boundary_stays_zero(rng):
    ops = assemble_operators(build_mesh(6))
    f = Field(rng.standard_normal(ops.mesh.n_nodes), ops.mesh)
    traj = solve_full(ops, f, Field.zeros(ops.mesh), TimeGrid.from_step(1.0, 0.1))
    assert not np.any(traj.states[:, ops.mesh.boundary_mask])


def test_factorization_is_cached():
    ops = assemble_operators(build_mesh(5))
    assert step_factor(ops, 0.1) is step_factor(ops, 0.1)
    assert step_factor(ops, 0.1) is not step_factor(ops, 0.2)


def test_mesh_mismatch():
    ops = assemble_operators(build_mesh(4))
    with pytest.raises(IncompatibleOperandsError):
        solve_full(ops, Field.zeros(build_mesh(5)), Field.zeros(ops.mesh), TimeGrid.from_step(1.0, 0.5))


def test_second_order_in_h():
    """L2 error against the closed form at a fine time step (time error negligible)."""
    grid = TimeGrid.from_step(1.0, 1 / 512)
    errs = []
    for n in (8, 16, 32):
        ops = assemble_operators(build_mesh(n))
        s = sine_mode(ops.mesh)
        u = solve_full(ops, s, Field.zeros(ops.mesh), grid).final
        errs.append(l2_norm(Field(u.coeffs - heat_amplitude(1.0) * s.coeffs, ops.mesh)))
    order = np.polyfit(np.log([1 / 8, 1 / 16, 1 / 32]), np.log(errs), 1)[0]
    assert order >= 1.7
