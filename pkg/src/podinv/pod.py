"""POD basis construction by the method of snapshots and the reduced Galerkin solver."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import (
    DegenerateSpectrumError,
    IncompatibleOperandsError,
    InvalidArgumentError,
    NumericFailureError,
    RankDeficiencyError,
)
from .forward import TimeGrid, Trajectory, solve_full
from .mesh_fem import Field, FemOperators, Mesh, build_mesh, evaluation_matrix

BASIS_FORMAT_VERSION = 1

# eigenvalues below this fraction of the largest one are treated as zero
RANK_CUTOFF = 1e-12


@dataclass(eq=False)
class SnapshotSet:
    """Snapshots stored as rows of ``data`` (shape ``(n_snapshots, n_nodes)``)."""

    data: np.ndarray
    mesh: Mesh
    steps: int
    n_sources: int
    include_differences: bool

    @property
    def n_snapshots(self) -> int:
        return self.data.shape[0]

    def field(self, i: int) -> Field:
        return Field(self.data[i], self.mesh)


@dataclass(eq=False)
class PodBasis:
    """M-orthonormal POD modes stored as columns of ``modes``."""

    modes: np.ndarray
    eigenvalues: np.ndarray
    rank: int
    rho: float
    epsilon: Optional[float]
    mesh: Mesh
    provenance: dict = field(default_factory=dict)

    def mode(self, k: int) -> Field:
        return Field(self.modes[:, k], self.mesh)

    def truncate(self, rank: int) -> "PodBasis":
        """Leading ``rank`` modes of this basis."""
        if not 1 <= rank <= self.rank:
            raise InvalidArgumentError(f"rank must lie in [1, {self.rank}]")
        return PodBasis(
            modes=self.modes[:, :rank].copy(),
            eigenvalues=self.eigenvalues,
            rank=rank,
            rho=tail_ratio(self.eigenvalues, rank),
            epsilon=self.epsilon,
            mesh=self.mesh,
            provenance=dict(self.provenance, truncated_from=self.rank),
        )


@dataclass(eq=False)
class ReducedOperators:
    stiffness: np.ndarray
    lift: np.ndarray
    mass_lift: np.ndarray
    mesh: Mesh
    sensor_modes: Optional[np.ndarray] = None
    _propagators: dict = field(default_factory=dict, repr=False)

    @property
    def rank(self) -> int:
        return self.lift.shape[1]

    def propagator(self, dt: float) -> np.ndarray:
        """Dense single-step map ``(I + dt A_r)^{-1}``."""
        key = float(dt)
        if key not in self._propagators:
            n = self.rank
            c = sla.cho_factor(np.eye(n) + dt * self.stiffness)
            self._propagators[key] = sla.cho_solve(c, np.eye(n))
        return self._propagators[key]

    def project(self, f: np.ndarray) -> np.ndarray:
        """Coefficients ``Phi^T M f``."""
        return self.mass_lift.T @ f


def build_snapshot_set(trajectories: Sequence[Trajectory], include_differences: bool = True) -> SnapshotSet:
    """Stack snapshots source by source.

    With ``include_differences`` each source contributes its ``m + 1`` states
    followed by the ``m`` difference quotients ``(u_k - u_{k-1}) / dt``.
    Otherwise only the states ``u_1, ..., u_m`` are kept.
    """
    if not trajectories:
        raise InvalidArgumentError("need at least one trajectory")
    first = trajectories[0]
    blocks = []
    for traj in trajectories:
        if not traj.mesh.compatible(first.mesh) or traj.grid != first.grid:
            raise IncompatibleOperandsError("trajectories must share mesh and time grid")
        if include_differences:
            diffs = np.diff(traj.states, axis=0) / traj.grid.dt
            blocks.append(np.vstack([traj.states, diffs]))
        else:
            blocks.append(traj.states[1:])
    return SnapshotSet(
        data=np.vstack(blocks),
        mesh=first.mesh,
        steps=first.grid.m,
        n_sources=len(trajectories),
        include_differences=include_differences,
    )


def correlation_matrix(snaps: SnapshotSet) -> np.ndarray:
    y = snaps.data
    k = y @ (snaps.mesh.mass @ y.T) / snaps.n_snapshots
    return 0.5 * (k + k.T)


def correlation_eig(snaps: SnapshotSet) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of ``K_ij = (y_i, y_j)_{L2} / N_S``, largest first, negatives clamped to 0."""
    if snaps.n_snapshots < 1:
        raise InvalidArgumentError("empty snapshot set")
    k = correlation_matrix(snaps)
    try:
        mu, v = np.linalg.eigh(k)
    except np.linalg.LinAlgError as exc:
        raise NumericFailureError(f"eigensolver failed: {exc}") from exc
    order = np.argsort(mu)[::-1]
    mu, v = mu[order], v[:, order]
    return np.clip(mu, 0.0, None), v


def tail_ratio(eigenvalues: np.ndarray, rank: int) -> float:
    mu = np.asarray(eigenvalues, dtype=float)
    total = mu.sum()
    if total <= 0:
        raise DegenerateSpectrumError("all eigenvalues are zero")
    return float(mu[rank:].sum() / total)


def select_rank(eigenvalues: np.ndarray, epsilon: float) -> int:
    """Smallest ``N`` with ``sum(mu[N:]) / sum(mu) < epsilon``."""
    if not 0.0 < epsilon < 1.0:
        raise InvalidArgumentError("epsilon must lie in (0, 1)")
    mu = np.asarray(eigenvalues, dtype=float)
    total = mu.sum()
    if mu.size == 0 or total <= 0:
        raise DegenerateSpectrumError("all eigenvalues are zero")
    # tails[N] = sum(mu[N:]) accumulated from the small end
    tails = np.append(np.cumsum(mu[::-1])[::-1], 0.0)
    ok = np.flatnonzero(tails[1:] / total < epsilon)
    return int(ok[0]) + 1


def build_basis(
    snaps: SnapshotSet,
    eigenvalues: np.ndarray,
    eigenvectors: np.ndarray,
    rank: int,
    epsilon: Optional[float] = None,
) -> PodBasis:
    """Modes ``phi_k = sum_j (v_k)_j y_j / sqrt(N_S mu_k)``.

    A single Cholesky re-orthonormalization in the mass inner product removes
    the rounding drift of modes with small eigenvalues; the span is unchanged.
    Each mode is signed so that its largest-magnitude coefficient is positive.
    """
    mu = np.asarray(eigenvalues, dtype=float)
    if not 1 <= rank <= mu.size:
        raise InvalidArgumentError(f"rank must lie in [1, {mu.size}]")
    if mu[0] <= 0 or mu[rank - 1] <= RANK_CUTOFF * mu[0]:
        raise RankDeficiencyError(
            f"requested {rank} modes but eigenvalue {rank} is numerically zero"
        )
    v = eigenvectors[:, :rank]
    modes = snaps.data.T @ v / np.sqrt(snaps.n_snapshots * mu[:rank])
    mass = snaps.mesh.mass
    gram = modes.T @ (mass @ modes)
    try:
        chol = np.linalg.cholesky(0.5 * (gram + gram.T))
    except np.linalg.LinAlgError as exc:
        raise NumericFailureError(f"POD modes lost orthogonality: {exc}") from exc
    modes = sla.solve_triangular(chol, modes.T, lower=True).T
    idx = np.argmax(np.abs(modes), axis=0)
    signs = np.sign(modes[idx, np.arange(rank)])
    signs[signs == 0] = 1.0
    modes = modes * signs
    return PodBasis(
        modes=modes,
        eigenvalues=mu,
        rank=rank,
        rho=tail_ratio(mu, rank),
        epsilon=epsilon,
        mesh=snaps.mesh,
    )


def projection_error_ratio(snaps: SnapshotSet, basis: PodBasis) -> float:
    """``sum_i ||y_i - P y_i||^2 / sum_i ||y_i||^2`` with ``P`` the L2 projection on the modes."""
    mass = snaps.mesh.mass
    y = snaps.data
    coef = y @ (mass @ basis.modes)
    resid = y - coef @ basis.modes.T
    num = np.einsum("ij,ij->", resid, (mass @ resid.T).T)
    den = np.einsum("ij,ij->", y, (mass @ y.T).T)
    return float(num / den)


def snapshots_from_sources(
    ops: FemOperators,
    sources: Sequence[Field],
    grid: TimeGrid,
    include_differences: bool = True,
    g: Optional[Field] = None,
) -> SnapshotSet:
    g = g if g is not None else Field.zeros(ops.mesh)
    trajs = [solve_full(ops, f, g, grid) for f in sources]
    return build_snapshot_set(trajs, include_differences=include_differences)


def pod_from_snapshots(snaps: SnapshotSet, epsilon: float) -> PodBasis:
    mu, v = correlation_eig(snaps)
    rank = select_rank(mu, epsilon)
    return build_basis(snaps, mu, v, rank, epsilon=epsilon)


def reduce_operators(basis: PodBasis, ops: FemOperators, sensors=None) -> ReducedOperators:
    """Galerkin projection ``A_r = Phi^T A Phi``; caches mode values at sensors if given."""
    if not basis.mesh.compatible(ops.mesh):
        raise IncompatibleOperandsError("basis and operators live on different meshes")
    phi = basis.modes
    a_r = phi.T @ (ops.stiffness @ phi)
    a_r = 0.5 * (a_r + a_r.T)
    sensor_modes = None
    if sensors is not None:
        sensor_modes = evaluation_matrix(ops.mesh, sensors.points) @ phi
    return ReducedOperators(
        stiffness=a_r,
        lift=phi,
        mass_lift=np.asarray(ops.mass @ phi),
        mesh=ops.mesh,
        sensor_modes=sensor_modes,
    )


def solve_reduced(
    red: ReducedOperators,
    basis: PodBasis,
    f: Field,
    g: Field,
    grid: TimeGrid,
) -> tuple[np.ndarray, Field]:
    """Reduced backward Euler ``(I + dt A_r) c_k = c_{k-1} + dt Phi^T M f``.

    Returns the ``(m + 1, rank)`` coefficient trajectory, starting from the L2
    projection of ``g``, and the lifted final state.
    """
    for fld in (f, g):
        if not red.mesh.compatible(fld.mesh):
            raise IncompatibleOperandsError("field and reduced operators live on different meshes")
    prop = red.propagator(grid.dt)
    load = grid.dt * red.project(f.coeffs)
    coeffs = np.empty((grid.m + 1, red.rank))
    coeffs[0] = red.project(g.coeffs)
    for k in range(1, grid.m + 1):
        coeffs[k] = prop @ (coeffs[k - 1] + load)
    return coeffs, Field(red.lift @ coeffs[-1], red.mesh)


def estimate_epod(h: float, dt: float, T: float, rho: float) -> float:
    """``(h^2 + dt |ln dt| + sqrt(T rho / dt))^2``."""
    return float((h**2 + dt * abs(np.log(dt)) + np.sqrt(T * rho / dt)) ** 2)


def save_basis(path, basis: PodBasis) -> None:
    """Write ``basis`` to an ``.npz`` container (see README for the layout)."""
    np.savez(
        path,
        format_version=np.int64(BASIS_FORMAT_VERSION),
        modes=basis.modes,
        eigenvalues=basis.eigenvalues,
        rank=np.int64(basis.rank),
        rho=np.float64(basis.rho),
        epsilon=np.float64(np.nan if basis.epsilon is None else basis.epsilon),
        n_div=np.int64(basis.mesh.n_div),
        provenance=np.array(json.dumps(basis.provenance, sort_keys=True)),
    )


def load_basis(path, mesh: Optional[Mesh] = None) -> PodBasis:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != BASIS_FORMAT_VERSION:
            raise InvalidArgumentError(f"unsupported basis format version {version}")
        n_div = int(data["n_div"])
        if mesh is None:
            mesh = build_mesh(n_div)
        elif mesh.n_div != n_div:
            raise IncompatibleOperandsError(f"basis was built on n_div={n_div}, mesh has {mesh.n_div}")
        eps = float(data["epsilon"])
        return PodBasis(
            modes=np.array(data["modes"]),
            eigenvalues=np.array(data["eigenvalues"]),
            rank=int(data["rank"]),
            rho=float(data["rho"]),
            epsilon=None if np.isnan(eps) else eps,
            mesh=mesh,
            provenance=json.loads(str(data["provenance"])),
        )
