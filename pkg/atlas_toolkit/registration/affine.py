"""Nine-parameter linear part T = expm(sum_p a_p G_p) plus translation, fitted by Gauss-Newton."""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from ..core.errors import InvalidInputError
from ..geometry.grid import GridSpec
from ..mixture.responsibilities import EPS_PI
from .matching import map_points, matching_terms, warp_prior

logger = logging.getLogger("atlas-toolkit")


def _generators() -> np.ndarray:
    g = np.zeros((9, 3, 3))
    # rotations about x, y, z
    for p, (i, j) in enumerate(((1, 2), (0, 2), (0, 1))):
        g[p, i, j], g[p, j, i] = -1.0, 1.0
    # zooms x, y, z
    for p in range(3):
        g[3 + p, p, p] = 1.0
    # shears xy, xz, yz
    for p, (i, j) in enumerate(((0, 1), (0, 2), (1, 2))):
        g[6 + p, i, j] = g[6 + p, j, i] = 1.0
    g.setflags(write=False)
    return g


GENERATORS = _generators()
GENERATOR_NAMES = ("rot_x", "rot_y", "rot_z", "zoom_x", "zoom_y", "zoom_z", "shear_xy", "shear_xz", "shear_yz")


def lie_algebra(a: np.ndarray) -> np.ndarray:
    return np.einsum("p,pij->ij", np.asarray(a, dtype=np.float64), GENERATORS)


def exp_map(a: np.ndarray) -> np.ndarray:
    """3x3 linear transform with det = exp(trace Q) > 0."""
    a = np.asarray(a, dtype=np.float64).reshape(9)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("affine parameters must be finite")
    return linalg.expm(lie_algebra(a))


def exp_map_derivatives(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """T and dT/da_p (9, 3, 3) from the exact Frechet derivative of expm."""
    Q = lie_algebra(a)
    T = linalg.expm(Q)
    dT = np.stack([linalg.expm_frechet(Q, G, compute_expm=False) for G in GENERATORS])
    return T, dT


def prior_precision_matrix(rot: float, zoom: float, shear: float) -> np.ndarray:
    return np.diag([rot] * 3 + [zoom] * 3 + [shear] * 3).astype(np.float64)


@dataclass
class AffineParams:
    """Generator coordinates a (9), translation t (3, template mm) and the prior precision on a."""

    a: np.ndarray = field(default_factory=lambda: np.zeros(9))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    prior_precision: np.ndarray = field(default_factory=lambda: prior_precision_matrix(1e-4, 1e-2, 1e-4))

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64).reshape(9)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.prior_precision = np.asarray(self.prior_precision, dtype=np.float64).reshape(9, 9)
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.t))):
            raise InvalidInputError("affine parameters must be finite")
        if not np.allclose(self.prior_precision, self.prior_precision.T):
            raise InvalidInputError("affine prior precision must be symmetric")
        if np.min(np.linalg.eigvalsh(self.prior_precision)) < -1e-12:
            raise InvalidInputError("affine prior precision must be positive semi-definite")

    @classmethod
    def from_config(cls, config, t=None) -> "AffineParams":
        precision = prior_precision_matrix(
            config.affine_rot_precision, config.affine_zoom_precision, config.affine_shear_precision
        )
        return cls(np.zeros(9), np.zeros(3) if t is None else t, precision)

    def copy(self) -> "AffineParams":
        return AffineParams(self.a.copy(), self.t.copy(), self.prior_precision.copy())

    @property
    def matrix(self) -> np.ndarray:
        return exp_map(self.a)

    def log_prior(self) -> float:
        return float(-0.5 * self.a @ self.prior_precision @ self.a)

    def to_homogeneous(self) -> np.ndarray:
        """4x4 matrix mapping subject mm (after the velocity warp) to template mm."""
        out = np.eye(4)
        out[:3, :3] = self.matrix
        out[:3, 3] = self.t
        return out


def affine_objective(gamma: np.ndarray, atlas, weights: np.ndarray, phi_vox: np.ndarray,
                     subject: GridSpec, params: AffineParams, eps: float = EPS_PI) -> float:
    """Matching term plus the Gaussian prior on a."""
    xi = map_points(phi_vox, subject, params.matrix, params.t)
    warped = warp_prior(atlas.pi, atlas.grid, xi, weights, eps)
    return matching_terms(gamma, warped).value + params.log_prior()


def affine_grad_hess(gamma: np.ndarray, atlas, weights: np.ndarray, phi_vox: np.ndarray,
                     subject: GridSpec, params: AffineParams, eps: float = EPS_PI):
    """Gradient (12) and PSD Gauss-Newton Hessian (12, 12) over (a, t)."""
    T, dT = exp_map_derivatives(params.a)
    phi_mm = subject.to_mm(phi_vox.reshape(-1, 3))
    xi = phi_mm @ T.T + params.t[None, :]
    terms = matching_terms(gamma, warp_prior(atlas.pi, atlas.grid, xi, weights, eps))

    n = phi_mm.shape[0]
    design = np.zeros((n, 3, 12))
    design[:, :, :9] = np.einsum("pij,nj->nip", dT, phi_mm)
    design[:, :, 9:] = np.eye(3)[None]
    grad = np.einsum("nip,ni->p", design, terms.residual)
    hess = np.einsum("nip,nij,njq->pq", design, terms.curvature, design)
    grad[:9] -= params.prior_precision @ params.a
    hess[:9, :9] += params.prior_precision
    return grad, 0.5 * (hess + hess.T)


@dataclass
class AffineUpdate:
    params: AffineParams
    delta: float
    accepted: bool
    damping: float
    flags: list = field(default_factory=list)


def gauss_newton_affine_update(gamma: np.ndarray, atlas, weights: np.ndarray, phi_vox: np.ndarray,
                               subject: GridSpec, params: AffineParams, eps: float = EPS_PI,
                               damping: float = 1e-2, max_backtracks: int = 8) -> AffineUpdate:
    """Damped step (H + lambda diag-scale I)^-1 g, with lambda x10 after each bound decrease."""
    start = affine_objective(gamma, atlas, weights, phi_vox, subject, params, eps)
    grad, hess = affine_grad_hess(gamma, atlas, weights, phi_vox, subject, params, eps)
    scale = float(np.mean(np.diag(hess))) or 1.0
    for attempt in range(max_backtracks + 1):
        step = linalg.lstsq(hess + damping * scale * np.eye(12), grad)[0]
        trial = AffineParams(params.a + step[:9], params.t + step[9:], params.prior_precision)
        value = affine_objective(gamma, atlas, weights, phi_vox, subject, trial, eps)
        if np.isfinite(value) and value >= start:
            logger.debug("Affine step accepted (|step|=%.3g, gain=%.4g)", np.linalg.norm(step), value - start)
            return AffineUpdate(trial, value - start, True, max(damping * 0.1, 1e-8))
        damping *= 10.0
    logger.debug("Affine step rejected after %d damping increases", max_backtracks)
    return AffineUpdate(params.copy(), 0.0, False, damping, ["rejected"])
