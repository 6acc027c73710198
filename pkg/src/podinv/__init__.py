"""POD reduced-order reconstruction of source terms in parabolic equations."""

from .errors import PodInvError
from .mesh_fem import Field, Mesh, assemble_operators, build_mesh
from .forward import TimeGrid, solve_full
from .pod import PodBasis, pod_from_snapshots, reduce_operators, snapshots_from_sources
from .inverse import FullEngine, ObjectiveConfig, PodEngine, gradient_descent, lambda_fixed_point

__version__ = "0.1.0"

__all__ = [
    "PodInvError",
    "Field",
    "Mesh",
    "assemble_operators",
    "build_mesh",
    "TimeGrid",
    "solve_full",
    "PodBasis",
    "pod_from_snapshots",
    "reduce_operators",
    "snapshots_from_sources",
    "FullEngine",
    "ObjectiveConfig",
    "PodEngine",
    "gradient_descent",
    "lambda_fixed_point",
]
