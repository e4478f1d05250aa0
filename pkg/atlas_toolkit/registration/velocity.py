"""Initial-velocity registration: objective, gradient, Gauss-Newton Hessian action and update."""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..core.errors import FoldoverError, InvalidInputError
from ..geometry.grid import DeformationField, GridSpec, jacobian_matrices
from ..mixture.responsibilities import EPS_PI
from .affine import AffineParams
from .matching import map_points, matching_terms, warp_prior
from .multigrid import GNSystem, MultigridResult, multigrid_solve
from .operator import OperatorSpec, apply_LtL, penalty_energy
from .shooting import geodesic_shoot

logger = logging.getLogger("atlas-toolkit")


@dataclass
class VelocityParams:
    """Initial velocity u (nx, ny, nz, 3) in mm on the subject grid."""

    u: np.ndarray
    operator: OperatorSpec

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 4 or self.u.shape[3] != 3:
            raise InvalidInputError(f"velocity must be (nx, ny, nz, 3), got {self.u.shape}")
        if not np.all(np.isfinite(self.u)):
            raise InvalidInputError("velocity has non-finite entries")

    @classmethod
    def zeros(cls, dims, operator: OperatorSpec) -> "VelocityParams":
        return cls(np.zeros(tuple(dims) + (3,)), operator)

    def copy(self) -> "VelocityParams":
        return VelocityParams(self.u.copy(), self.operator)

    def momentum(self) -> np.ndarray:
        return apply_LtL(self.u, self.operator)

    def log_prior(self) -> float:
        return -penalty_energy(self.u, self.operator)


@dataclass
class VelocityContext:
    """Quantities of one iterate reused by the Hessian action."""

    blocks: np.ndarray              # (nx, ny, nz, 3, 3) A^T C A
    operator: OperatorSpec
    deformation: DeformationField
    value: float


def shoot(velocity: VelocityParams, steps: int) -> DeformationField:
    if not np.any(velocity.u):
        return DeformationField.identity(velocity.u.shape[:3])
    return geodesic_shoot(velocity.u, velocity.operator, steps)


def velocity_objective(gamma: np.ndarray, atlas, weights: np.ndarray, affine: AffineParams,
                       velocity: VelocityParams, subject: GridSpec, steps: int = 16,
                       eps: float = EPS_PI, deformation: Optional[DeformationField] = None):
    """(matching term - penalty, deformation). Raises FoldoverError for non-invertible flows."""
    if deformation is None:
        deformation = shoot(velocity, steps)
    xi = map_points(deformation.forward, subject, affine.matrix, affine.t)
    warped = warp_prior(atlas.pi, atlas.grid, xi, weights, eps)
    return matching_terms(gamma, warped).value + velocity.log_prior(), deformation


def velocity_grad(gamma: np.ndarray, atlas, weights: np.ndarray, affine: AffineParams,
                  velocity: VelocityParams, subject: GridSpec, steps: int = 16,
                  eps: float = EPS_PI, deformation: Optional[DeformationField] = None):
    """Gradient of the objective in u and the context for velocity_hessian_apply.

    With steps == 1 the flow is phi = id + u and the gradient is exact; with
    more steps the endpoint gradient is carried back through the Jacobian of
    the forward map.
    """
    if deformation is None:
        deformation = shoot(velocity, steps)
    T = affine.matrix
    xi = map_points(deformation.forward, subject, T, affine.t)
    terms = matching_terms(gamma, warp_prior(atlas.pi, atlas.grid, xi, weights, eps))

    dims = velocity.u.shape[:3]
    n = int(np.prod(dims))
    if steps == 1:
        design = np.broadcast_to(T, (n, 3, 3))
    else:
        scale = np.asarray(subject.spacing)
        jac = jacobian_matrices(deformation.forward) * (scale[:, None] / scale[None, :])
        design = np.einsum("ij,njk->nik", T, jac.reshape(n, 3, 3))

    matching = np.einsum("nij,ni->nj", design, terms.residual).reshape(dims + (3,))
    grad = matching - apply_LtL(velocity.u, velocity.operator)
    blocks = np.einsum("nji,njk,nkl->nil", design, terms.curvature, design).reshape(dims + (3, 3))
    value = terms.value + velocity.log_prior()
    return grad, VelocityContext(blocks, velocity.operator, deformation, value)


def velocity_hessian_apply(direction: np.ndarray, context: VelocityContext) -> np.ndarray:
    """(A^T C A + L^T L) d, matrix-free."""
    direction = np.asarray(direction, dtype=np.float64)
    return np.einsum("...ij,...j->...i", context.blocks, direction) + apply_LtL(direction, context.operator)


@dataclass
class VelocityUpdate:
    params: VelocityParams
    deformation: DeformationField
    delta: float
    accepted: bool
    damping: float
    solver: Optional[MultigridResult] = None
    flags: list = field(default_factory=list)


def gauss_newton_velocity_update(gamma: np.ndarray, atlas, weights: np.ndarray, affine: AffineParams,
                                 velocity: VelocityParams, subject: GridSpec, steps: int = 16,
                                 eps: float = EPS_PI, damping: float = 1e-2, max_backtracks: int = 8,
                                 tol: float = 1e-6, max_cycles: int = 30,
                                 deformation: Optional[DeformationField] = None) -> VelocityUpdate:
    """One damped Gauss-Newton step, halved on foldover or bound decrease."""
    grad, context = velocity_grad(gamma, atlas, weights, affine, velocity, subject, steps, eps, deformation)
    start = context.value
    system = GNSystem(context.blocks, velocity.operator, damping)
    solved = multigrid_solve(grad, system, tol=tol, max_cycles=max_cycles)
    flags = list(solved.flags)

    factor = 1.0
    for attempt in range(max_backtracks + 1):
        trial = VelocityParams(velocity.u + factor * solved.solution, velocity.operator)
        try:
            value, warp = velocity_objective(gamma, atlas, weights, affine, trial, subject, steps, eps)
        except FoldoverError as e:
            logger.debug("Velocity step x%.3g folds at %s; halving", factor, e.voxel)
            factor *= 0.5
            continue
        if np.isfinite(value) and value >= start:
            if attempt == 0:
                damping = max(damping * 0.1, 1e-8)
            return VelocityUpdate(trial, warp, value - start, True, damping, solved, flags)
        factor *= 0.5

    flags.append("rejected")
    logger.debug("Velocity step rejected after %d halvings", max_backtracks)
    return VelocityUpdate(velocity.copy(), context.deformation, 0.0, False, damping * 10.0, solved, flags)
