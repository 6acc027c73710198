import numpy as np
import pytest

from podinv.errors import (
    DegenerateIterateError,
    IncompatibleOperandsError,
    InvalidArgumentError,
    StepSizeTooLargeError,
)
from podinv.forward import TimeGrid, forward_map_full
from podinv.inverse import (
    FullEngine,
    ObjectiveConfig,
    PodEngine,
    estimate_lipschitz,
    gradient_descent,
    initial_lambda,
    lambda_fixed_point,
    lambda_update,
    objective_gradient,
    objective_value,
)
from podinv.mesh_fem import Field, assemble_operators, build_mesh, l2_inner, l2_norm
from podinv.pod import build_basis, correlation_eig, reduce_operators, snapshots_from_sources
from podinv.sensors import Observation, add_noise, empirical_inner, make_sensor_grid
from podinv.sources import letter_source


@pytest.fixture(scope="module")
def engines(small):
    """FEM engine and a full-rank POD engine on the n_div = 4 problem."""
    mesh, ops, grid, sensors = small
    rng = np.random.default_rng(99)
    sources = [Field(rng.standard_normal(mesh.n_nodes), mesh) for _ in range(9)]
    snaps = snapshots_from_sources(ops, sources, grid)
    mu, v = correlation_eig(snaps)
    basis = build_basis(snaps, mu, v, len(ops.free_dofs))
    red = reduce_operators(basis, ops, sensors)
    return {"fem": FullEngine(ops, grid, sensors), "pod": PodEngine(red, grid, sensors, basis=basis)}


def dense_operator(engine):
    n_nodes = engine.mesh.n_nodes
    return np.column_stack([engine.apply_linear(e) for e in np.eye(n_nodes)])


def min_norm_solution(engine, data):
    """Minimum-L2-norm least-squares solution via a dense SVD in M-weighted coordinates."""
    s = dense_operator(engine)
    chol = np.linalg.cholesky(engine.mesh.mass.toarray())
    b = s @ np.linalg.inv(chol.T)
    return np.linalg.solve(chol.T, np.linalg.pinv(b, rcond=1e-12) @ data)


def rand_field(rng, mesh):
    return Field(rng.standard_normal(mesh.n_nodes), mesh)


@pytest.mark.parametrize("variant", ["fem", "pod"])
def test_objective_examples(engines, variant, rng):
    eng = engines[variant]
    mesh = eng.mesh
    f = rand_field(rng, mesh)
    exact = Observation(eng.apply(f.coeffs), 0.0, None)
    assert objective_value(eng, f, exact, 0.0) < 1e-12
    m = Observation(rng.standard_normal(eng.n), 0.1, 0)
    assert objective_value(eng, Field.zeros(mesh), m, 0.0) == pytest.approx(empirical_inner(m.values, m.values))
    j12 = objective_value(eng, f, m, 0.3 + 0.2)
    assert j12 == pytest.approx(objective_value(eng, f, m, 0.3) + 0.2 * l2_norm(f) ** 2, rel=1e-12)


@pytest.mark.parametrize("variant", ["fem", "pod"])
def test_gradient_at_zero_residual(engines, variant, rng):
    eng = engines[variant]
    f = rand_field(rng, eng.mesh)
    m = Observation(eng.apply(f.coeffs), 0.0, None)
    grad = objective_gradient(eng, f, m, 0.7)
    assert np.abs(grad.coeffs - 0.7 * f.coeffs).max() < 1e-12


@pytest.mark.parametrize("variant", ["fem", "pod"])
@pytest.mark.parametrize("lam", [0.0, 1e-3])
def test_gradient_matches_finite_differences(engines, variant, lam, rng):
    eng = engines[variant]
    mesh = eng.mesh
    m = Observation(rng.standard_normal(eng.n) * 1e-2, 0.0, None)
    f = rand_field(rng, mesh)
    grad = objective_gradient(eng, f, m, lam)
    for _ in range(20):
        v = rand_field(rng, mesh)
        eps = 1e-3
        jp = objective_value(eng, Field(f.coeffs + eps * v.coeffs, mesh), m, lam)
        jm = objective_value(eng, Field(f.coeffs - eps * v.coeffs, mesh), m, lam)
        fd = (jp - jm) / (2 * eps)
        # J carries the factor 2 that the returned gradient leaves out
        assert 2 * l2_inner(grad, v) == pytest.approx(fd, rel=1e-5)


@pytest.mark.parametrize("variant", ["fem", "pod"])
def test_adjoint_identity(engines, variant, rng):
    eng = engines[variant]
    for _ in range(20):
        f, v = rand_field(rng, eng.mesh), rand_field(rng, eng.mesh)
        sf, sv = eng.apply_linear(f.coeffs), eng.apply_linear(v.coeffs)
        lhs = empirical_inner(sf, sv)
        rhs = l2_inner(Field(eng.adjoint(sf), eng.mesh), v)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_fem_engine_matches_forward_map(engines, rng):
    eng = engines["fem"]
    f = rand_field(rng, eng.mesh)
    ref = forward_map_full(eng.ops, f, Field.zeros(eng.mesh), eng.grid, eng.sensors)
    assert np.abs(eng.apply(f.coeffs) - ref).max() < 1e-14


def test_initial_state_offset(rng):
    mesh = build_mesh(5)
    ops = assemble_operators(mesh)
    grid = TimeGrid.from_step(0.1, 0.05)
    sensors = make_sensor_grid(3)
    g = rand_field(rng, mesh).with_dirichlet()
    f = rand_field(rng, mesh)
    eng = FullEngine(ops, grid, sensors, g=g)
    assert np.abs(eng.apply(f.coeffs) - forward_map_full(ops, f, g, grid, sensors)).max() < 1e-13


@pytest.mark.parametrize("variant", ["fem", "pod"])
def test_convexity(engines, variant, rng):
    eng = engines[variant]
    m = Observation(rng.standard_normal(eng.n) * 1e-2, 0.0, None)
    for _ in range(10):
        f1, f2 = rand_field(rng, eng.mesh), rand_field(rng, eng.mesh)
        t = rng.uniform()
        mix = Field(t * f1.coeffs + (1 - t) * f2.coeffs, eng.mesh)
        lhs = objective_value(eng, mix, m, 1e-3)
        rhs = t * objective_value(eng, f1, m, 1e-3) + (1 - t) * objective_value(eng, f2, m, 1e-3)
        assert lhs <= rhs + 1e-10


@pytest.mark.parametrize("variant", ["fem", "pod"])
def test_descent_reaches_min_norm_solution(engines, variant, rng):
    eng = engines[variant]
    f_true = rand_field(rng, eng.mesh)
    data = eng.apply(f_true.coeffs)
    cfg = ObjectiveConfig(lambda_n=0.0, tol=1e-12, max_iter=20000)
    res = gradient_descent(eng, Observation(data, 0.0, None), cfg)
    resid = eng.apply(res.f_hat.coeffs) - data
    assert np.sqrt(np.mean(resid**2)) < 1e-6
    ref = min_norm_solution(eng, data)
    assert l2_norm(Field(res.f_hat.coeffs - ref, eng.mesh)) < 1e-6 * l2_norm(Field(ref, eng.mesh))


def test_exact_recovery_in_range(engines, rng):
    """A truth in the range of the adjoint is the minimum-norm solution and is recovered."""
    eng = engines["fem"]
    f_true = Field(eng.adjoint(rng.standard_normal(eng.n)), eng.mesh)
    obs = Observation(eng.apply(f_true.coeffs), 0.0, None)
    for lam in (1e-10, 1e-12):  # Tikhonov bias scales like lambda / sigma_min^2
        res = gradient_descent(eng, obs, ObjectiveConfig(lambda_n=lam, tol=1e-13, max_iter=50000))
        err = l2_norm(Field(res.f_hat.coeffs - f_true.coeffs, eng.mesh)) / l2_norm(f_true)
        assert err < 1e-4


def test_zero_data_gives_zero(engines, rng):
    eng = engines["fem"]
    f0 = rand_field(rng, eng.mesh)
    cfg = ObjectiveConfig(lambda_n=1e-2, tol=1e-8, stop_rule="gradient-norm", max_iter=100000)
    res = gradient_descent(eng, Observation(np.zeros(eng.n), 0.0, None), cfg, f0=f0)
    assert res.converged
    assert l2_norm(res.f_hat) < 1e-5


@pytest.mark.parametrize("variant", ["fem", "pod"])
def test_history_monotone(engines, variant, rng):
    eng = engines[variant]
    obs = add_noise(eng.apply(rand_field(rng, eng.mesh).coeffs), 1e-3, seed=1)
    res = gradient_descent(eng, obs, ObjectiveConfig(lambda_n=1e-4, tol=1e-9))
    assert res.alpha < 1.0 / estimate_lipschitz(eng, 1e-4)
    assert np.all(np.diff(res.objective_history) <= 1e-15)
    assert res.iterations == len(res.objective_history) - 1
    assert set(res.timing) >= {"setup", "iterate"}


def test_objective_stop_rule(engines, rng):
    eng = engines["fem"]
    obs = Observation(eng.apply(rand_field(rng, eng.mesh).coeffs), 0.0, None)
    res = gradient_descent(eng, obs, ObjectiveConfig(lambda_n=0.0, tol=1e-8, stop_rule="objective"))
    assert res.converged and res.objective_history[-1] <= 1e-8


def test_divergence_detected(engines, rng):
    eng = engines["fem"]
    obs = Observation(rng.standard_normal(eng.n), 0.0, None)
    big = 10.0 / estimate_lipschitz(eng, 0.0)
    with pytest.raises(StepSizeTooLargeError, match="alpha"):
        gradient_descent(eng, obs, ObjectiveConfig(lambda_n=0.0, alpha=big, max_iter=100))


def test_max_iter_respected(engines, rng):
    eng = engines["pod"]
    obs = Observation(rng.standard_normal(eng.n), 0.0, None)
    res = gradient_descent(eng, obs, ObjectiveConfig(tol=1e-300, max_iter=7))
    assert res.iterations == 7 and not res.converged


def test_pod_and_fem_reconstructions_agree(engines, rng):
    fem, pod = engines["fem"], engines["pod"]
    obs = add_noise(fem.apply(rand_field(rng, fem.mesh).coeffs), 1e-3, seed=4)
    cfg = ObjectiveConfig(lambda_n=1e-3, tol=1e-13, max_iter=100000)
    a = gradient_descent(fem, obs, cfg).f_hat
    b = gradient_descent(pod, obs, cfg).f_hat
    assert l2_norm(Field(a.coeffs - b.coeffs, fem.mesh)) < 1e-6


def test_config_validation():
    for kwargs in ({"lambda_n": -1.0}, {"alpha": 0.0}, {"tol": 0.0}, {"max_iter": 0}, {"stop_rule": "never"}):
        with pytest.raises(InvalidArgumentError):
            ObjectiveConfig(**kwargs)


def test_shape_checks(engines):
    eng = engines["fem"]
    with pytest.raises(IncompatibleOperandsError):
        objective_value(eng, Field.zeros(build_mesh(5)), Observation(np.zeros(eng.n), 0.0, None), 0.0)
    with pytest.raises(IncompatibleOperandsError):
        objective_value(eng, Field.zeros(eng.mesh), Observation(np.zeros(eng.n + 1), 0.0, None), 0.0)


def test_initial_lambda():
    assert initial_lambda(10_000, 2) == pytest.approx(10 ** (-8 / 3))
    assert initial_lambda(10_000, 2) == pytest.approx(2.154e-3, rel=1e-3)


def test_lambda_update_formula(engines, rng):
    eng = engines["fem"]
    f = rand_field(rng, eng.mesh)
    data = rng.standard_normal(eng.n)
    r = eng.apply(f.coeffs) - data
    rhs = eng.n**-0.5 * np.sqrt(np.mean(r**2)) / l2_norm(f)
    lam = lambda_update(eng, f.coeffs, data, d=2)
    assert lam ** (0.5 + 2 / 8) == pytest.approx(rhs, rel=1e-12)
    with pytest.raises(DegenerateIterateError):
        lambda_update(eng, np.zeros(eng.mesh.n_nodes), data)


def test_lambda_fixed_point_converges():
    mesh = build_mesh(8)
    eng = FullEngine(assemble_operators(mesh), TimeGrid.from_step(1.0, 1 / 8), make_sensor_grid(100))
    obs = add_noise(eng.apply(letter_source("O", mesh).coeffs), 1e-3, seed=0)
    hist, res = lambda_fixed_point(eng, obs, d=2, inner_config=ObjectiveConfig(tol=1e-6))
    assert hist[0] == pytest.approx(initial_lambda(eng.n, 2))
    assert len(hist) <= 21
    assert abs(hist[-1] - hist[-2]) < 0.05 * hist[-2]
    assert res.lambda_used == hist[-2]
    assert "lambda_iteration" in res.timing


def test_lambda_fixed_point_few_sensors_degenerates(engines, rng):
    """With 36 sensors the update keeps growing lambda until the iterate vanishes."""
    eng = engines["pod"]
    obs = add_noise(eng.apply(rand_field(rng, eng.mesh).coeffs), 1e-3, seed=2)
    with pytest.raises(DegenerateIterateError):
        lambda_fixed_point(eng, obs, inner_config=ObjectiveConfig(tol=1e-8))


def test_lambda_fixed_point_zero_data(engines):
    eng = engines["pod"]
    with pytest.raises(InvalidArgumentError):
        lambda_fixed_point(eng, Observation(np.zeros(eng.n), 0.0, None))
