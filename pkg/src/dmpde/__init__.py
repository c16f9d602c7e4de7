"""Mesh-free elliptic PDE solvers on point clouds: diffusion-maps operators,
ghost points for Dirichlet boundaries, direct and neural least-squares solvers."""

from .errors import ConfigError, NumericalFailure
from .manifolds import (ManifoldId, ManifoldSpec, PointCloud, diffusion_kappa, embed, exact_solution,
                        get_spec, rhs_f, sample_cloud, test_grid)
from .neighbors import NeighborTable, knn
from .operator import (DensityEstimate, SparseOperator, apply, assemble_L, estimate_density, kernel_h,
                       shift)
from .gpdm import GhostSet, GpdmOperator, assemble_gpdm, build_extrapolation, estimate_normals, place_ghosts
from .direct import LinearSolveReport, solve_closed, solve_dirichlet
from .nn import (Architecture, LossContext, NetworkParams, TrainConfig, TrainingHistory, batch_forward,
                 forward, init_params, init_two_layer_ntk, loss_gradient, loss_value, train)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "NumericalFailure",
    "ManifoldId", "ManifoldSpec", "PointCloud", "diffusion_kappa", "embed", "exact_solution", "get_spec",
    "rhs_f", "sample_cloud", "test_grid",
    "NeighborTable", "knn",
    "DensityEstimate", "SparseOperator", "apply", "assemble_L", "estimate_density", "kernel_h", "shift",
    "GhostSet", "GpdmOperator", "assemble_gpdm", "build_extrapolation", "estimate_normals", "place_ghosts",
    "LinearSolveReport", "solve_closed", "solve_dirichlet",
    "Architecture", "LossContext", "NetworkParams", "TrainConfig", "TrainingHistory", "batch_forward",
    "forward", "init_params", "init_two_layer_ntk", "loss_gradient", "loss_value", "train",
]
