"""Full-order backward-Euler time stepping for ``u_t + L u = f``."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import scipy.sparse.linalg as spla

from .errors import IncompatibleOperandsError, InvalidArgumentError, SolverFailureError
from .mesh_fem import Field, FemOperators, Mesh, evaluation_matrix

if TYPE_CHECKING:
    from .sensors import SensorSet


@dataclass(frozen=True)
class TimeGrid:
    T: float
    dt: float
    m: int

    def __post_init__(self):
        if self.m < 1 or self.dt <= 0 or self.T <= 0:
            raise InvalidArgumentError("time grid needs T > 0, dt > 0 and m >= 1")
        if abs(self.m * self.dt - self.T) > 1e-12:
            raise InvalidArgumentError(f"m * dt = {self.m * self.dt!r} does not equal T = {self.T!r}")

    @classmethod
    def from_step(cls, T: float, dt: float) -> "TimeGrid":
        if dt <= 0 or T <= 0:
            raise InvalidArgumentError("T and dt must be positive")
        m = int(round(T / dt))
        if m < 1 or abs(m * dt - T) > 1e-12:
            raise InvalidArgumentError(f"dt = {dt!r} does not divide T = {T!r}")
        return cls(T=float(T), dt=float(dt), m=m)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.m + 1) * self.dt


@dataclass(eq=False)
class Trajectory:
    """States ``u(t_0), ..., u(t_m)`` stored as rows of a ``(m+1, n_nodes)`` array."""

    states: np.ndarray
    grid: TimeGrid
    mesh: Mesh

    def __len__(self) -> int:
        return self.states.shape[0]

    def field(self, k: int) -> Field:
        return Field(self.states[k], self.mesh)

    @property
    def final(self) -> Field:
        return self.field(self.grid.m)


class StepFactor:
    """Sparse LU of ``M + dt A`` restricted to the free dofs."""

    def __init__(self, ops: FemOperators, dt: float):
        self.ops = ops
        self.dt = dt
        system = (ops.mass_free + dt * ops.stiffness_free).tocsc()
        try:
            self._lu = spla.splu(system)
        except RuntimeError as exc:
            raise SolverFailureError(f"backward-Euler system is singular: {exc}") from exc

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self._lu.solve(rhs)


_factor_lock = threading.Lock()


def step_factor(ops: FemOperators, dt: float) -> StepFactor:
    """Factorization of the step matrix, cached on ``ops`` per time step."""
    with _factor_lock:
        cache = ops.__dict__.setdefault("_step_factors", {})
        key = float(dt)
        if key not in cache:
            cache[key] = StepFactor(ops, key)
        return cache[key]


def _check(ops: FemOperators, *fields: Field) -> None:
    for fld in fields:
        if not ops.mesh.compatible(fld.mesh):
            raise IncompatibleOperandsError("field and operators live on different meshes")


def solve_full(ops: FemOperators, f: Field, g: Field, grid: TimeGrid) -> Trajectory:
    """Backward Euler: ``(M + dt A) u_k = M u_{k-1} + dt M f`` on the free dofs."""
    _check(ops, f, g)
    free = ops.free_dofs
    factor = step_factor(ops, grid.dt)
    load = grid.dt * (ops.mass @ f.coeffs)[free]
    states = np.zeros((grid.m + 1, ops.mesh.n_nodes))
    states[0] = g.coeffs
    u = g.coeffs[free].copy()
    m_free = ops.mass_free
    for k in range(1, grid.m + 1):
        u = factor.solve(m_free @ u + load)
        states[k, free] = u
    if not np.all(np.isfinite(states)):
        raise SolverFailureError("non-finite values in time stepping")
    return Trajectory(states=states, grid=grid, mesh=ops.mesh)


def forward_map_full(ops: FemOperators, f: Field, g: Field, grid: TimeGrid, sensors: "SensorSet") -> np.ndarray:
    """Sensor readings of the final-time FEM solution."""
    traj = solve_full(ops, f, g, grid)
    return evaluation_matrix(ops.mesh, sensors.points) @ traj.states[-1]
