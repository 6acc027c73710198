"""Structured P1 meshes of the unit square and finite-element assembly.

Nodes are numbered row by row, ``index = j * (n_div + 1) + i`` for the node at
``(i / n_div, j / n_div)``. Every grid cell is split along its lower-left to
upper-right diagonal into two counter-clockwise triangles.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp

from .errors import (
    CoefficientError,
    IncompatibleOperandsError,
    InvalidArgumentError,
    OutOfDomainError,
)

Coefficient = Union[float, Callable[[np.ndarray, np.ndarray], np.ndarray]]

_REF_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


@dataclass(eq=False)
class Mesh:
    """Structured right-triangle mesh of [0, 1]^2."""

    n_div: int
    nodes: np.ndarray
    triangles: np.ndarray
    boundary_mask: np.ndarray

    @property
    def h(self) -> float:
        return 1.0 / self.n_div

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @cached_property
    def free_dofs(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    @cached_property
    def mass(self) -> sp.csr_matrix:
        """Consistent P1 mass matrix (exact for piecewise-linear fields)."""
        vals = self.areas[:, None, None] * _REF_MASS[None, :, :]
        return _scatter(self, vals)

    def compatible(self, other: "Mesh") -> bool:
        return self is other or self.n_div == other.n_div

    def grid_values(self, coeffs: np.ndarray) -> np.ndarray:
        """Reshape nodal values to a ``(n_div+1, n_div+1)`` array indexed ``[j, i]``."""
        return np.asarray(coeffs).reshape(self.n_div + 1, self.n_div + 1)


@dataclass(eq=False)
class Field:
    """Nodal coefficient vector of a P1 function on ``mesh``."""

    coeffs: np.ndarray
    mesh: Mesh

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.mesh.n_nodes,):
            raise IncompatibleOperandsError(
                f"field has {self.coeffs.shape} coefficients, mesh has {self.mesh.n_nodes} nodes"
            )

    @classmethod
    def zeros(cls, mesh: Mesh) -> "Field":
        return cls(np.zeros(mesh.n_nodes), mesh)

    @classmethod
    def interpolate(cls, func: Callable[[np.ndarray, np.ndarray], np.ndarray], mesh: Mesh) -> "Field":
        x1, x2 = mesh.nodes[:, 0], mesh.nodes[:, 1]
        vals = np.broadcast_to(np.asarray(func(x1, x2), dtype=float), x1.shape)
        return cls(vals.copy(), mesh)

    def with_dirichlet(self) -> "Field":
        c = self.coeffs.copy()
        c[self.mesh.boundary_mask] = 0.0
        return Field(c, self.mesh)


@dataclass(eq=False)
class FemOperators:
    """Assembled P1 operators for ``-div(a grad u) + c u`` with zero Dirichlet data."""

    mesh: Mesh
    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    free_dofs: np.ndarray
    coeff_a: Coefficient
    coeff_c: Coefficient

    @cached_property
    def mass_free(self) -> sp.csc_matrix:
        f = self.free_dofs
        return self.mass[f][:, f].tocsc()

    @cached_property
    def stiffness_free(self) -> sp.csc_matrix:
        f = self.free_dofs
        return self.stiffness[f][:, f].tocsc()


def build_mesh(n_div: int) -> Mesh:
    """Structured triangulation of the unit square with ``n_div`` cells per side."""
    if int(n_div) != n_div or n_div < 2:
        raise InvalidArgumentError(f"n_div must be an integer >= 2, got {n_div!r}")
    n = int(n_div)
    ticks = np.arange(n + 1) / n
    x1, x2 = np.meshgrid(ticks, ticks)  # x2 varies along rows
    nodes = np.column_stack([x1.ravel(), x2.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n))
    v00 = (j * (n + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    boundary = (
        (nodes[:, 0] == 0.0) | (nodes[:, 0] == 1.0) | (nodes[:, 1] == 0.0) | (nodes[:, 1] == 1.0)
    )
    return Mesh(n_div=n, nodes=nodes, triangles=triangles, boundary_mask=boundary)


def _scatter(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_nodes
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    # exact symmetry regardless of duplicate summation order
    return ((mat + mat.T) * 0.5).tocsr()


def _coefficient_at(coef: Coefficient, points: np.ndarray) -> np.ndarray:
    if callable(coef):
        vals = np.asarray(coef(points[:, 0], points[:, 1]), dtype=float)
        return np.broadcast_to(vals, (points.shape[0],))
    return np.full(points.shape[0], float(coef))


def assemble_operators(mesh: Mesh, a: Coefficient = 1.0, c: Coefficient = 0.0) -> FemOperators:
    """Assemble mass and stiffness matrices on ``mesh``.

    Constant coefficients are integrated exactly. Callable coefficients
    ``a(x1, x2)``, ``c(x1, x2)`` are frozen at each triangle centroid, which
    keeps the P1 convergence order.
    """
    a_e = _coefficient_at(a, mesh.centroids)
    c_e = _coefficient_at(c, mesh.centroids)
    if np.any(~np.isfinite(a_e)) or np.any(a_e <= 0.0):
        raise CoefficientError("diffusion coefficient a(x) must be positive at every quadrature point")
    if np.any(~np.isfinite(c_e)) or np.any(c_e < 0.0):
        raise CoefficientError("reaction coefficient c(x) must be non-negative at every quadrature point")

    p = mesh.nodes[mesh.triangles]
    area = mesh.areas
    # gradients of the barycentric coordinates: rows of inv([[1, x, y], ...]) scaled
    x, y = p[:, :, 0], p[:, :, 1]
    bx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / (2 * area[:, None])
    by = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / (2 * area[:, None])
    grad = bx[:, :, None] * bx[:, None, :] + by[:, :, None] * by[:, None, :]
    local = (a_e * area)[:, None, None] * grad + (c_e * area)[:, None, None] * _REF_MASS[None]
    stiffness = _scatter(mesh, local)
    return FemOperators(
        mesh=mesh,
        mass=mesh.mass,
        stiffness=stiffness,
        free_dofs=mesh.free_dofs,
        coeff_a=a,
        coeff_c=c,
    )


def evaluation_matrix(mesh: Mesh, points: np.ndarray) -> sp.csr_matrix:
    """Sparse ``(len(points), n_nodes)`` matrix of P1 point evaluation."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise InvalidArgumentError("points must have shape (n, 2)")
    outside = np.any((pts < 0.0) | (pts > 1.0) | ~np.isfinite(pts), axis=1)
    if np.any(outside):
        bad = pts[np.argmax(outside)]
        raise OutOfDomainError(f"point {tuple(bad)} lies outside [0, 1]^2")
    n = mesh.n_div
    sx, sy = pts[:, 0] * n, pts[:, 1] * n
    i = np.minimum(np.floor(sx).astype(np.int64), n - 1)
    j = np.minimum(np.floor(sy).astype(np.int64), n - 1)
    s, t = sx - i, sy - j
    v00 = j * (n + 1) + i
    v11 = v00 + n + 2
    lower = t <= s
    # lower triangle (v00, v10, v11), upper triangle (v00, v11, v01)
    other = np.where(lower, v00 + 1, v00 + n + 1)
    w00 = np.where(lower, 1.0 - s, 1.0 - t)
    w_other = np.where(lower, s - t, t - s)
    w11 = np.where(lower, t, s)
    rows = np.repeat(np.arange(len(pts)), 3)
    cols = np.column_stack([v00, other, v11]).ravel()
    vals = np.column_stack([w00, w_other, w11]).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(pts), mesh.n_nodes))


def evaluate_at_points(field: Field, points: np.ndarray) -> np.ndarray:
    """Piecewise-linear interpolation of ``field`` at ``points``."""
    return evaluation_matrix(field.mesh, points) @ field.coeffs


def l2_inner(u: Field, v: Field) -> float:
    if not u.mesh.compatible(v.mesh):
        raise IncompatibleOperandsError("fields live on different meshes")
    return float(u.coeffs @ (u.mesh.mass @ v.coeffs))


def l2_norm(u: Field) -> float:
    return float(np.sqrt(max(l2_inner(u, u), 0.0)))
