"""Warped template priors and the derivatives of the matching term sum_jk gamma_jk log p_jk(xi_j)."""

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from ..core.errors import InvalidInputError
from ..geometry.grid import GridSpec, sample_trilinear_with_gradient
from ..mixture.responsibilities import EPS_PI, warped_prior


@dataclass
class WarpedPrior:
    """Template values at the mapped points and d log pi / d xi (template mm)."""

    pi: np.ndarray          # (N, K) raw interpolated template values
    prior: np.ndarray       # (N, K) normalized w_k pi_k / sum_c w_c pi_c
    dlog_pi: np.ndarray     # (N, K, 3)


@dataclass
class MatchingTerms:
    value: float            # sum_jk gamma_jk log prior_jk
    residual: np.ndarray    # (N, 3) d value / d xi_j
    curvature: np.ndarray   # (N, 3, 3) Gauss-Newton approximation of -d2 value / d xi_j^2


def map_points(phi_vox: np.ndarray, subject: GridSpec, T: np.ndarray, t: np.ndarray) -> np.ndarray:
    """xi = T phi + t in template mm for subject-voxel positions phi (N, 3)."""
    return subject.to_mm(phi_vox.reshape(-1, 3)) @ np.asarray(T).T + np.asarray(t)[None, :]


def warp_prior(atlas_pi: np.ndarray, atlas_grid: GridSpec, xi_mm: np.ndarray,
               weights: np.ndarray, eps: float = EPS_PI) -> WarpedPrior:
    """Sample the template (nx, ny, nz, K) at template-mm points xi (N, 3)."""
    if atlas_pi.ndim != 4:
        raise InvalidInputError(f"template must be (nx, ny, nz, K), got {atlas_pi.shape}")
    values, grad = sample_trilinear_with_gradient(atlas_pi, atlas_grid.to_voxel(xi_mm))
    floored = np.maximum(values, eps)
    # constant where the floor is active
    dlog = np.where((values > eps)[..., None], grad / floored[..., None], 0.0)
    dlog = dlog / np.asarray(atlas_grid.spacing)[None, None, :]
    return WarpedPrior(values, warped_prior(values, weights, eps), dlog)


def matching_terms(gamma: np.ndarray, warped: WarpedPrior) -> MatchingTerms:
    """Value, gradient and PSD curvature of the matching term in xi.

    d log p_k / d xi = h_k - sum_c p_c h_c with h = d log pi / d xi.
    """
    p = warped.prior
    h = warped.dlog_pi
    mass = gamma.sum(axis=1)
    mean_h = np.einsum("nk,nki->ni", p, h)
    residual = np.einsum("nk,nki->ni", gamma, h) - mass[:, None] * mean_h
    second = np.einsum("nk,nki,nkj->nij", p, h, h) - np.einsum("ni,nj->nij", mean_h, mean_h)
    curvature = mass[:, None, None] * second
    return MatchingTerms(float(np.sum(xlogy(gamma, p))), residual, curvature)
