"""Population tissue probability maps under a Dirichlet prior."""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.special import gammaln, xlogy

from .core.errors import InvalidInputError
from .geometry.grid import DeformationField, GridSpec, identity_map, jacobian_determinants, sample_trilinear
from .mixture.responsibilities import EPS_PI

logger = logging.getLogger("atlas-toolkit")

SIMPLEX_TOL = 1e-9
FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


@dataclass
class TissueAtlas:
    """pi (nx, ny, nz, K) on the template grid plus Dirichlet concentration alpha0 (K)."""

    pi: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    alpha0: Optional[np.ndarray] = None
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        if self.pi.ndim != 4 or self.pi.shape[3] < 1:
            raise InvalidInputError(f"template must be (nx, ny, nz, K), got {self.pi.shape}")
        K = self.pi.shape[3]
        self.spacing = GridSpec(self.pi.shape[:3], self.spacing).spacing
        self.alpha0 = np.full(K, 1.01) if self.alpha0 is None else np.asarray(self.alpha0, dtype=np.float64).reshape(K)
        if np.any(self.alpha0 < 1.0):
            raise InvalidInputError(f"alpha0 must be >= 1, got {self.alpha0}")
        if np.any(self.pi < 0) or not np.allclose(self.pi.sum(axis=3), 1.0, atol=SIMPLEX_TOL):
            raise InvalidInputError("template rows must be non-negative and sum to 1")
        if not self.class_names:
            self.class_names = [f"class{k + 1}" for k in range(K)]

    @property
    def K(self) -> int:
        return int(self.pi.shape[3])

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.pi.shape[:3], self.spacing)

    def flat(self) -> np.ndarray:
        return self.pi.reshape(-1, self.K)

    def with_pi(self, pi: np.ndarray) -> "TissueAtlas":
        return TissueAtlas(np.asarray(pi).reshape(self.pi.shape), self.spacing, self.alpha0.copy(), list(self.class_names))

    def copy(self) -> "TissueAtlas":
        return self.with_pi(self.pi.copy())

    @classmethod
    def uniform(cls, grid: GridSpec, classes: int, alpha0=1.01) -> "TissueAtlas":
        pi = np.full(tuple(grid.dims) + (classes,), 1.0 / classes)
        return cls(pi, grid.spacing, np.broadcast_to(np.asarray(alpha0, dtype=np.float64), (classes,)).copy())

    def foreground_centroid(self) -> np.ndarray:
        """Centroid (template mm) of 1 - pi of the class with the most mass; grid centre if flat."""
        background = int(np.argmax(self.pi.reshape(-1, self.K).sum(axis=0)))
        weight = 1.0 - self.pi[..., background].reshape(-1)
        if weight.sum() <= 0 or np.ptp(weight) == 0:
            return np.zeros(3)
        return weight @ self.grid.voxel_points_mm() / weight.sum()


@dataclass
class PushedStats:
    """Template-space accumulators summed over subjects.

    N[j, k]     sum_i det J * gamma_ik at the pre-image of voxel j
    Wsum[j, k]  sum_i mass_ij w_ik / sum_c w_ic pi_jc
    masses / weights keep each subject's pushed mass and tissue weights for the template objective.
    """

    N: np.ndarray
    Wsum: np.ndarray
    masses: list = field(default_factory=list)
    weights: list = field(default_factory=list)

    @classmethod
    def zeros(cls, n_voxels: int, classes: int) -> "PushedStats":
        return cls(np.zeros((n_voxels, classes)), np.zeros((n_voxels, classes)))

    def merge(self, other: "PushedStats") -> "PushedStats":
        return PushedStats(
            self.N + other.N,
            self.Wsum + other.Wsum,
            self.masses + other.masses,
            self.weights + other.weights,
        )


def push_responsibilities(gamma: np.ndarray, subject: GridSpec, deformation: DeformationField,
                          T: np.ndarray, t: np.ndarray, weights: np.ndarray, atlas: TissueAtlas) -> PushedStats:
    """Map one subject's responsibilities (N_i, K) into template space with volume weighting."""
    if np.any(deformation.jac_det <= 0):
        raise InvalidInputError("cannot push through a non-invertible deformation")
    K = atlas.K
    gamma_field = np.asarray(gamma, dtype=np.float64).reshape(tuple(subject.dims) + (K,))

    y_mm = atlas.grid.voxel_points_mm()
    T_inv = np.linalg.inv(T)
    z_vox = subject.to_voxel((y_mm - np.asarray(t)[None, :]) @ T_inv.T)
    ident = identity_map(subject.dims)
    x_vox = z_vox + sample_trilinear(deformation.inverse - ident, z_vox)

    dims = np.asarray(subject.dims, dtype=np.float64)
    inside = np.all((x_vox >= -1e-6) & (x_vox <= dims - 1.0 + 1e-6), axis=1)
    if min(subject.dims) >= 2:
        inv_det = sample_trilinear(jacobian_determinants(deformation.inverse), z_vox)[:, 0]
    else:
        inv_det = np.ones(z_vox.shape[0])
    # subject voxels per template voxel
    volume = inv_det / np.linalg.det(T) * np.prod(atlas.spacing) / np.prod(subject.spacing)
    N = np.where(inside[:, None], volume[:, None] * sample_trilinear(gamma_field, x_vox), 0.0)
    N = np.maximum(N, 0.0)

    w = np.asarray(weights, dtype=np.float64)
    mass = N.sum(axis=1)
    denom = np.maximum(atlas.flat(), EPS_PI) @ w
    Wsum = mass[:, None] * w[None, :] / denom[:, None]
    return PushedStats(N, Wsum, [mass], [w])


@dataclass
class TemplateUpdate:
    pi: np.ndarray              # (N_pi, K)
    fallbacks: int = 0          # uniform rows from a zero denominator
    retained: int = 0           # rows kept from the previous template


def update_template_unit_weights(stats: PushedStats, alpha0: np.ndarray) -> TemplateUpdate:
    """pi_jk = (N_jk + alpha_k - 1) / (sum_c (N_jc + alpha_c) - K)."""
    alpha0 = np.asarray(alpha0, dtype=np.float64)
    if np.any(alpha0 < 1.0):
        raise InvalidInputError(f"alpha0 must be >= 1, got {alpha0}")
    K = alpha0.size
    numer = np.maximum(stats.N + alpha0[None, :] - 1.0, 0.0)
    denom = numer.sum(axis=1)
    empty = denom <= 0
    pi = np.empty_like(numer)
    pi[~empty] = numer[~empty] / denom[~empty, None]
    pi[empty] = 1.0 / K
    if empty.any():
        logger.debug("Template closed form: %d empty voxels set uniform", int(empty.sum()))
    return TemplateUpdate(pi, fallbacks=int(empty.sum()))


def _voxel_objective(stats: PushedStats, pi: np.ndarray, alpha0: np.ndarray) -> np.ndarray:
    out = np.sum(xlogy(stats.N + alpha0[None, :] - 1.0, pi), axis=1)
    for mass, w in zip(stats.masses, stats.weights):
        out -= xlogy(mass, pi @ w)
    return out


def template_objective(stats: PushedStats, pi: np.ndarray, alpha0: np.ndarray) -> float:
    """sum_jk (N + alpha - 1) log pi - sum_ij mass_ij log sum_c w_ic pi_jc."""
    return float(np.sum(_voxel_objective(stats, pi, np.asarray(alpha0, dtype=np.float64))))


def update_template_weighted(stats: PushedStats, alpha0: np.ndarray, previous: np.ndarray) -> TemplateUpdate:
    """Approximate stationary point (N + alpha - 1) / Wsum projected onto the simplex.

    Each voxel keeps its previous row unless the new one does not lower the
    per-voxel objective.
    """
    alpha0 = np.asarray(alpha0, dtype=np.float64)
    if np.any(alpha0 < 1.0):
        raise InvalidInputError(f"alpha0 must be >= 1, got {alpha0}")
    previous = np.asarray(previous, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = (stats.N + alpha0[None, :] - 1.0) / stats.Wsum
        pi = raw / raw.sum(axis=1, keepdims=True)
    finite = np.all(np.isfinite(pi), axis=1) & np.all(pi >= 0, axis=1)
    pi[~finite] = previous[~finite]

    with np.errstate(divide="ignore", invalid="ignore"):
        before = _voxel_objective(stats, previous, alpha0)
        after = _voxel_objective(stats, pi, alpha0)
    worse = ~(after >= before - 1e-12 * np.abs(before))
    worse &= finite
    pi[worse] = previous[worse]
    retained = int((~finite).sum() + worse.sum())
    if retained:
        logger.debug("Weighted template update kept %d previous rows", retained)
    return TemplateUpdate(pi, retained=retained)


def dirichlet_log_prior(pi: np.ndarray, alpha0: np.ndarray) -> float:
    """sum_j log Dir(pi_j | alpha0)."""
    alpha0 = np.asarray(alpha0, dtype=np.float64)
    flat = np.asarray(pi).reshape(-1, alpha0.size)
    log_norm = gammaln(alpha0.sum()) - gammaln(alpha0).sum()
    return float(flat.shape[0] * log_norm + np.sum(xlogy(alpha0[None, :] - 1.0, flat)))


def smooth_template(pi: np.ndarray, fwhm: float, spacing=(1.0, 1.0, 1.0), eps: float = EPS_PI) -> np.ndarray:
    """Per-class Gaussian smoothing (fwhm in mm), then renormalize, floor at eps and renormalize."""
    if fwhm < 0:
        raise InvalidInputError(f"fwhm must be >= 0, got {fwhm}")
    out = np.asarray(pi, dtype=np.float64).copy()
    if fwhm > 0:
        sigma = [fwhm * FWHM_TO_SIGMA / h for h in spacing] + [0.0]
        out = ndimage.gaussian_filter(out, sigma=sigma, mode="nearest")
    out /= out.sum(axis=-1, keepdims=True)
    out = np.maximum(out, eps)
    return out / out.sum(axis=-1, keepdims=True)


def posterior_concentration(stats: PushedStats, alpha0: np.ndarray) -> np.ndarray:
    """Dirichlet posterior alpha_j = alpha0 + N_j."""
    return np.asarray(alpha0, dtype=np.float64)[None, :] + stats.N
