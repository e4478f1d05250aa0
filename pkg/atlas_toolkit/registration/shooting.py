"""Geodesic shooting from an initial velocity by momentum transport."""

import logging

import numpy as np

from ..core.errors import InvalidInputError
from ..geometry.grid import (
    DeformationField,
    identity_map,
    invert_displacement,
    jacobian_matrices,
    sample_trilinear,
)
from .operator import OperatorSpec, apply_green, apply_LtL

logger = logging.getLogger("atlas-toolkit")


def _transported_velocity(momentum: np.ndarray, inverse: np.ndarray, spec: OperatorSpec,
                          scale: np.ndarray) -> np.ndarray:
    """Velocity in voxels per unit time carried by m_0 pulled back through `inverse`."""
    # m_t = |det D psi| D psi^T m_0(psi), in mm units
    jac = jacobian_matrices(inverse) * (scale[:, None] / scale[None, :])
    det = np.linalg.det(jac)
    m0 = sample_trilinear(momentum, inverse)
    m_t = det[..., None] * np.einsum("...ji,...j->...i", jac, m0)
    return apply_green(m_t, spec) / scale


def geodesic_shoot(u: np.ndarray, spec: OperatorSpec, steps: int = 16) -> DeformationField:
    """Integrate the flow of the geodesic starting at velocity u (mm) over unit time.

    Each step is a midpoint (second-order) step: the forward displacement is
    advanced along its trajectories, and the inverse is solved from the
    forward map by Newton iteration at the half and full step, so the
    momentum is always transported through a consistent inverse. With
    steps == 1 the forward map is identity + u.

    Maps are in voxel coordinates of u's grid. Raises FoldoverError if the
    forward map is not invertible.
    """
    if steps < 1:
        raise InvalidInputError(f"steps must be >= 1, got {steps}")
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 4 or u.shape[3] != 3 or not np.all(np.isfinite(u)):
        raise InvalidInputError("initial velocity must be a finite (nx, ny, nz, 3) field")
    dims = u.shape[:3]
    scale = np.asarray(spec.spacing)
    ident = identity_map(dims)
    velocity = u / scale

    if steps == 1:
        phi = velocity
        inverse = invert_displacement(phi)
    else:
        dt = 1.0 / steps
        momentum = apply_LtL(u, spec)
        phi = np.zeros_like(u)
        inverse = ident.copy()
        for step in range(steps):
            half = phi + 0.5 * dt * sample_trilinear(velocity, ident + phi)
            inverse = invert_displacement(half, guess=inverse - 0.5 * dt * velocity)
            midpoint = _transported_velocity(momentum, inverse, spec, scale)
            phi = phi + dt * sample_trilinear(midpoint, ident + half)
            inverse = invert_displacement(phi, guess=inverse - 0.5 * dt * midpoint)
            if step < steps - 1:
                velocity = _transported_velocity(momentum, inverse, spec, scale)

    deformation = DeformationField(ident + phi, inverse)
    deformation.check_invertible()
    logger.debug(
        "Shot %d steps: max |u| %.3g mm, min det J %.4g",
        steps, float(np.max(np.abs(u))), float(deformation.jac_det.min()),
    )
    return deformation
