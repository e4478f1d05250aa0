from .affine import (
    GENERATORS,
    AffineParams,
    AffineUpdate,
    affine_grad_hess,
    affine_objective,
    exp_map,
    exp_map_derivatives,
    gauss_newton_affine_update,
)
from .matching import MatchingTerms, WarpedPrior, map_points, matching_terms, warp_prior
from .multigrid import GNSystem, MultigridResult, multigrid_solve
from .operator import OperatorSpec, apply_green, apply_LtL, penalty_energy
from .shooting import geodesic_shoot
from .velocity import (
    VelocityContext,
    VelocityParams,
    VelocityUpdate,
    gauss_newton_velocity_update,
    velocity_grad,
    velocity_hessian_apply,
    velocity_objective,
)

__all__ = [
    "GENERATORS",
    "AffineParams",
    "AffineUpdate",
    "affine_grad_hess",
    "affine_objective",
    "exp_map",
    "exp_map_derivatives",
    "gauss_newton_affine_update",
    "MatchingTerms",
    "WarpedPrior",
    "map_points",
    "matching_terms",
    "warp_prior",
    "GNSystem",
    "MultigridResult",
    "multigrid_solve",
    "OperatorSpec",
    "apply_green",
    "apply_LtL",
    "penalty_energy",
    "geodesic_shoot",
    "VelocityContext",
    "VelocityParams",
    "VelocityUpdate",
    "gauss_newton_velocity_update",
    "velocity_grad",
    "velocity_hessian_apply",
    "velocity_objective",
]
