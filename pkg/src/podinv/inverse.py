"""Tikhonov-regularized source reconstruction by gradient descent.

The objective is ``J[f] = ||S f - m||_n^2 + lam ||f||_{L2}^2``. Following the
usual convention for this problem the factor 2 from differentiating the
squares is absorbed into the step size, so the "gradient" returned here is
``S^*(S f - m) + lam f``, i.e. half the true L2 gradient.

Adjoints are the exact transposes of the discrete forward chain
(load projection, backward-Euler propagator, sensor evaluation). The Riesz map
``M^{-1}`` that turns the transposed chain into an L2 representative cancels
against the mass matrix in the load vector, so no mass solve is needed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import (
    DegenerateIterateError,
    IncompatibleOperandsError,
    InvalidArgumentError,
    StepSizeTooLargeError,
)
from .forward import TimeGrid, step_factor
from .mesh_fem import Field, FemOperators, evaluation_matrix
from .pod import PodBasis, ReducedOperators
from .sensors import Observation, SensorSet

STOP_RULES = ("objective", "relative-update", "gradient-norm")


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda_n: float = 1e-6
    alpha: Optional[float] = None  # None: 0.9 / L from power iteration
    tol: float = 1e-5
    max_iter: int = 20000
    stop_rule: str = "relative-update"
    power_iterations: int = 30
    divergence_window: int = 5

    def __post_init__(self):
        if self.lambda_n < 0:
            raise InvalidArgumentError("lambda_n must be non-negative")
        if self.alpha is not None and self.alpha <= 0:
            raise InvalidArgumentError("alpha must be positive")
        if self.tol <= 0 or self.max_iter < 1:
            raise InvalidArgumentError("tol must be positive and max_iter >= 1")
        if self.stop_rule not in STOP_RULES:
            raise InvalidArgumentError(f"stop_rule must be one of {STOP_RULES}")


@dataclass(eq=False)
class InverseResult:
    f_hat: Field
    objective_history: list
    iterations: int
    lambda_used: float
    alpha: float
    converged: bool
    timing: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "lambda": self.lambda_used,
            "alpha": self.alpha,
            "converged": self.converged,
            "final_objective": self.objective_history[-1],
        }


class ForwardEngine:
    """Affine sensor map ``f -> E S_dis f``; subclasses supply the linear part and its adjoint."""

    variant = "abstract"

    def __init__(self, mesh, grid: TimeGrid, sensors: SensorSet):
        self.mesh = mesh
        self.grid = grid
        self.sensors = sensors
        self.mass = mesh.mass
        self.offset = np.zeros(sensors.n)

    @property
    def n(self) -> int:
        return self.sensors.n

    def apply_linear(self, f: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        """Coefficients of ``w`` with ``(w, v)_{L2} = (r, E S v)_n`` for every ``v``."""
        raise NotImplementedError

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.apply_linear(f) + self.offset

    def l2_sq(self, f: np.ndarray) -> float:
        return float(f @ (self.mass @ f))

    def _check_field(self, f: Field) -> np.ndarray:
        if not self.mesh.compatible(f.mesh):
            raise IncompatibleOperandsError("field lives on a different mesh than the engine")
        return f.coeffs

    def _check_obs(self, obs: Observation) -> np.ndarray:
        if obs.n != self.n:
            raise IncompatibleOperandsError(f"observation has {obs.n} values, engine has {self.n} sensors")
        return obs.values


class FullEngine(ForwardEngine):
    """Finite-element forward map with one reused sparse factorization."""

    variant = "fem"

    def __init__(self, ops: FemOperators, grid: TimeGrid, sensors: SensorSet, g: Optional[Field] = None):
        super().__init__(ops.mesh, grid, sensors)
        self.ops = ops
        self.factor = step_factor(ops, grid.dt)
        self.free = ops.free_dofs
        self.mass_free = ops.mass_free
        self.eval = evaluation_matrix(ops.mesh, sensors.points)
        self.eval_free_t = self.eval[:, self.free].T.tocsr()
        if g is not None:
            self._check_field(g)
            u = g.coeffs[self.free].copy()
            for _ in range(grid.m):
                u = self.factor.solve(self.mass_free @ u)
            self.offset = self.eval[:, self.free] @ u

    def final_state_linear(self, f: np.ndarray) -> np.ndarray:
        load = self.grid.dt * (self.mass @ f)[self.free]
        u = np.zeros(len(self.free))
        for _ in range(self.grid.m):
            u = self.factor.solve(self.mass_free @ u + load)
        out = np.zeros(self.mesh.n_nodes)
        out[self.free] = u
        return out

    def apply_linear(self, f: np.ndarray) -> np.ndarray:
        return self.eval @ self.final_state_linear(f)

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        w = self.eval_free_t @ r
        acc = np.zeros_like(w)
        for _ in range(self.grid.m):
            z = self.factor.solve(w)
            acc += z
            w = self.mass_free @ z
        out = np.zeros(self.mesh.n_nodes)
        out[self.free] = self.grid.dt * acc / self.n
        return out


class PodEngine(ForwardEngine):
    """Reduced forward map on the POD space; all work is in ``rank`` dimensions."""

    variant = "pod"

    def __init__(
        self,
        red: ReducedOperators,
        grid: TimeGrid,
        sensors: SensorSet,
        g: Optional[Field] = None,
        basis: Optional[PodBasis] = None,
    ):
        super().__init__(red.mesh, grid, sensors)
        self.red = red
        self.basis = basis
        self.prop = red.propagator(grid.dt)
        self.prop_t = np.ascontiguousarray(self.prop.T)
        if red.sensor_modes is not None and red.sensor_modes.shape[0] == sensors.n:
            self.sensor_modes = red.sensor_modes
        else:
            self.sensor_modes = evaluation_matrix(red.mesh, sensors.points) @ red.lift
        self.sensor_modes_t = np.ascontiguousarray(self.sensor_modes.T)
        self.mass_lift_t = np.ascontiguousarray(red.mass_lift.T)
        if g is not None:
            c = red.project(self._check_field(g))
            for _ in range(grid.m):
                c = self.prop @ c
            self.offset = self.sensor_modes @ c

    def final_coefficients_linear(self, f: np.ndarray) -> np.ndarray:
        load = self.grid.dt * (self.mass_lift_t @ f)
        c = np.zeros(self.red.rank)
        for _ in range(self.grid.m):
            c = self.prop @ (c + load)
        return c

    def apply_linear(self, f: np.ndarray) -> np.ndarray:
        return self.sensor_modes @ self.final_coefficients_linear(f)

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        w = self.sensor_modes_t @ r
        acc = np.zeros_like(w)
        for _ in range(self.grid.m):
            w = self.prop_t @ w
            acc += w
        return self.red.lift @ (self.grid.dt * acc / self.n)


def _objective(engine: ForwardEngine, f: np.ndarray, resid: np.ndarray, lam: float) -> float:
    return float(resid @ resid) / engine.n + lam * engine.l2_sq(f)


def objective_value(engine: ForwardEngine, f: Field, obs: Observation, lambda_n: float) -> float:
    """``||S f - m||_n^2 + lambda_n ||f||_{L2}^2``."""
    coeffs = engine._check_field(f)
    resid = engine.apply(coeffs) - engine._check_obs(obs)
    return _objective(engine, coeffs, resid, lambda_n)


def objective_gradient(engine: ForwardEngine, f: Field, obs: Observation, lambda_n: float) -> Field:
    """L2 representative of ``v -> (S f - m, S v)_n + lambda_n (f, v)``."""
    coeffs = engine._check_field(f)
    resid = engine.apply(coeffs) - engine._check_obs(obs)
    return Field(engine.adjoint(resid) + lambda_n * coeffs, engine.mesh)


def hessian_apply(engine: ForwardEngine, f: np.ndarray, lambda_n: float) -> np.ndarray:
    return engine.adjoint(engine.apply_linear(f)) + lambda_n * f


def estimate_lipschitz(engine: ForwardEngine, lambda_n: float, iterations: int = 30, seed: int = 0) -> float:
    """Largest eigenvalue of ``S^* S + lambda_n`` by power iteration in the L2 metric."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(engine.mesh.n_nodes)
    x /= np.sqrt(engine.l2_sq(x))
    est = lambda_n
    for _ in range(iterations):
        y = hessian_apply(engine, x, lambda_n)
        est = float(x @ (engine.mass @ y))
        norm = np.sqrt(engine.l2_sq(y))
        if norm == 0:
            break
        x = y / norm
    return max(est, lambda_n, np.finfo(float).tiny)


def gradient_descent(
    engine: ForwardEngine,
    obs: Observation,
    config: ObjectiveConfig,
    f0: Optional[Field] = None,
) -> InverseResult:
    """Iterate ``f <- f - alpha (S^*(S f - m) + lambda f)`` until the stop rule fires."""
    t0 = time.perf_counter()
    data = engine._check_obs(obs)
    lam = config.lambda_n
    f = np.zeros(engine.mesh.n_nodes) if f0 is None else engine._check_field(f0).copy()
    alpha = config.alpha
    if alpha is None:
        alpha = 0.9 / estimate_lipschitz(engine, lam, config.power_iterations)
    t1 = time.perf_counter()

    resid = engine.apply(f) - data
    obj = _objective(engine, f, resid, lam)
    history = [obj]
    best_f, best_obj = f, obj
    rises = 0
    converged = False
    it = 0
    while it < config.max_iter:
        if config.stop_rule == "objective" and obj <= config.tol:
            converged = True
            break
        grad = engine.adjoint(resid) + lam * f
        if config.stop_rule == "gradient-norm" and np.sqrt(engine.l2_sq(grad)) < config.tol:
            converged = True
            break
        step = alpha * grad
        f_new = f - step
        resid = engine.apply(f_new) - data
        obj_new = _objective(engine, f_new, resid, lam)
        it += 1
        history.append(obj_new)
        rises = rises + 1 if obj_new > obj else 0
        if rises >= config.divergence_window:
            raise StepSizeTooLargeError(
                f"objective increased {rises} times in a row with alpha={alpha:.3e}; "
                "use a smaller step (alpha < 1/L) or leave alpha unset for the automatic choice"
            )
        f, obj = f_new, obj_new
        if obj < best_obj:
            best_f, best_obj = f, obj
        if config.stop_rule == "relative-update":
            fnorm = np.sqrt(engine.l2_sq(f))
            if fnorm > 0 and np.sqrt(engine.l2_sq(step)) / fnorm < config.tol:
                converged = True
                break
    t2 = time.perf_counter()
    return InverseResult(
        f_hat=Field(best_f, engine.mesh),
        objective_history=history,
        iterations=it,
        lambda_used=lam,
        alpha=alpha,
        converged=converged,
        timing={"setup": t1 - t0, "iterate": t2 - t1},
    )


def initial_lambda(n: int, d: int = 2) -> float:
    """A priori starting value ``n^(-4 / (d + 4))``."""
    return float(n) ** (-4.0 / (d + 4))


def lambda_update(engine: ForwardEngine, f: np.ndarray, data: np.ndarray, d: int = 2) -> float:
    """Next value from ``lam^(1/2 + d/8) = n^(-1/2) ||S f - m||_n / ||f||_{L2}``."""
    fnorm = np.sqrt(engine.l2_sq(f))
    if fnorm < 1e-14:
        raise DegenerateIterateError("reconstruction has vanishing L2 norm; cannot update lambda")
    resid = engine.apply(f) - data
    rhs = engine.n ** -0.5 * np.sqrt(float(resid @ resid) / engine.n) / fnorm
    return float(rhs ** (1.0 / (0.5 + d / 8.0)))


def lambda_fixed_point(
    engine: ForwardEngine,
    obs: Observation,
    d: int = 2,
    inner_config: Optional[ObjectiveConfig] = None,
    max_outer: int = 20,
    norm_tol: float = 0.01,
    f0: Optional[Field] = None,
) -> tuple[list, InverseResult]:
    """Alternate reconstructions and regularization updates.

    Stops once ``||f_j||_{L2}`` changes by less than ``norm_tol`` (relative)
    between outer steps, or after ``max_outer`` steps. Returns the list of
    lambda values tried (plus the final update) and the last reconstruction.
    """
    data = engine._check_obs(obs)
    if not np.any(data):
        raise InvalidArgumentError("observation is identically zero")
    cfg = inner_config or ObjectiveConfig()
    lam = initial_lambda(engine.n, d)
    history = [lam]
    f = f0
    prev_norm = None
    result = None
    t0 = time.perf_counter()
    for _ in range(max_outer):
        result = gradient_descent(engine, obs, replace(cfg, lambda_n=lam), f0=f)
        f = result.f_hat
        fnorm = np.sqrt(engine.l2_sq(f.coeffs))
        lam = lambda_update(engine, f.coeffs, data, d)
        history.append(lam)
        if prev_norm is not None and abs(fnorm - prev_norm) < norm_tol * prev_norm:
            break
        prev_norm = fnorm
    result.timing["lambda_iteration"] = time.perf_counter() - t0
    return history, result
