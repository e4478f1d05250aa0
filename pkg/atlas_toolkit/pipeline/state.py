"""Per-subject data and the parameters the groupwise fit keeps for it."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..bias import BiasModel, evaluate_bias
from ..geometry.grid import DeformationField, GridSpec, VolumeGrid
from ..mixture.gauss_wishart import GaussWishartBundle
from ..mixture.responsibilities import LabelData
from ..registration.affine import AffineParams
from ..registration.matching import map_points
from ..registration.velocity import VelocityParams


@dataclass
class SubjectData:
    name: str
    volume: VolumeGrid
    labels: Optional[LabelData] = None
    sources: list[str] = field(default_factory=list)

    @property
    def grid(self) -> GridSpec:
        return self.volume.grid


@dataclass
class SubjectState:
    """Everything the coordinate ascent updates for one subject."""

    data: SubjectData
    weights: np.ndarray
    bias: BiasModel
    affine: AffineParams
    velocity: VelocityParams
    posterior: GaussWishartBundle
    gamma: np.ndarray
    deformation: DeformationField
    damping: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.data.name

    @property
    def grid(self) -> GridSpec:
        return self.data.grid

    def bias_field(self) -> np.ndarray:
        """(N, D) multiplicative correction."""
        return evaluate_bias(self.bias, self.grid.dims).reshape(-1, self.bias.channels)

    def template_points(self) -> np.ndarray:
        """xi_j in template mm for every subject voxel, (N, 3)."""
        return map_points(self.deformation.forward, self.grid, self.affine.matrix, self.affine.t)

    def copy(self) -> "SubjectState":
        return SubjectState(
            data=self.data,
            weights=self.weights.copy(),
            bias=self.bias.copy(),
            affine=self.affine.copy(),
            velocity=self.velocity.copy(),
            posterior=self.posterior.copy(),
            gamma=self.gamma.copy(),
            deformation=DeformationField(
                self.deformation.forward.copy(), self.deformation.inverse.copy(), self.deformation.jac_det.copy()
            ),
            damping=dict(self.damping),
        )


def intensity_centroid(volume: VolumeGrid) -> np.ndarray:
    """Intensity-weighted centroid (mm about the grid centre) over observed channels."""
    values = np.where(volume.flat_observed(), np.abs(volume.flat_values()), 0.0).sum(axis=1)
    if values.sum() <= 0:
        return np.zeros(3)
    return values @ volume.grid.voxel_points_mm() / values.sum()
