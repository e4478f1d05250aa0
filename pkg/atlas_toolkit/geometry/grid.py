"""Regular voxel grids, trilinear sampling, finite-difference derivatives and map composition.

Arrays are laid out (nx, ny, nz, channels). Point coordinates are voxel
indices; spacing only enters derivatives. Sampling outside the grid clamps
to the nearest edge voxel.
"""

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy import ndimage

from ..core.errors import FoldoverError, InvalidInputError


def _as_spacing(spacing) -> tuple[float, float, float]:
    values = tuple(float(s) for s in spacing)
    if len(values) != 3 or not all(np.isfinite(values)) or min(values) <= 0:
        raise InvalidInputError(f"spacing must be 3 positive reals, got {spacing}")
    return values


@dataclass(frozen=True)
class GridSpec:
    """Grid geometry: millimetre coordinates are centred on the middle of the grid."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise InvalidInputError(f"dims must be 3 positive integers, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def centre(self) -> np.ndarray:
        return (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0

    def to_mm(self, voxels: np.ndarray) -> np.ndarray:
        return (np.asarray(voxels, dtype=np.float64) - self.centre) * np.asarray(self.spacing)

    def to_voxel(self, mm: np.ndarray) -> np.ndarray:
        return np.asarray(mm, dtype=np.float64) / np.asarray(self.spacing) + self.centre

    def voxel_points_mm(self) -> np.ndarray:
        """(N, 3) millimetre position of every voxel in C order."""
        return self.to_mm(identity_map(self.dims).reshape(-1, 3))


@dataclass
class VolumeGrid:
    """Multi-channel scalar field with a per-voxel, per-channel missing mask."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    missing_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 3:
            values = values[..., None]
        if values.ndim != 4 or values.size == 0:
            raise InvalidInputError(
                f"volume must be (nx, ny, nz[, channels]) and non-empty, got shape {values.shape}"
            )
        self.spacing = _as_spacing(self.spacing)

        if self.missing_mask is None:
            mask = ~np.isfinite(values)
        else:
            mask = np.asarray(self.missing_mask, dtype=bool)
            if mask.ndim == 3:
                mask = mask[..., None]
            if mask.shape != values.shape:
                raise InvalidInputError(
                    f"missing_mask shape {mask.shape} does not match values {values.shape}"
                )
            if not np.all(np.isfinite(values[~mask])):
                raise InvalidInputError("non-finite values at voxels not marked missing")
        # the mask is authoritative; keep the array arithmetic-safe
        self.values = np.where(mask, 0.0, values)
        self.missing_mask = mask

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape[:3])

    @property
    def channels(self) -> int:
        return int(self.values.shape[3])

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.dims, self.spacing)

    def flat_values(self) -> np.ndarray:
        """(N, D) view in C order."""
        return self.values.reshape(-1, self.channels)

    def flat_observed(self) -> np.ndarray:
        """(N, D) boolean, True where the channel was measured."""
        return ~self.missing_mask.reshape(-1, self.channels)


@dataclass
class VectorField:
    """Three components per voxel: displacements, velocities or coordinates."""

    vectors: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 4 or vectors.shape[3] != 3 or vectors.size == 0:
            raise InvalidInputError(f"vector field must be (nx, ny, nz, 3), got {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise InvalidInputError("vector field has non-finite entries")
        self.vectors = vectors
        self.spacing = _as_spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.vectors.shape[:3])

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0)) -> "VectorField":
        return cls(np.zeros(tuple(dims) + (3,)), spacing)


@dataclass
class DeformationField:
    """Forward map, inverse map (voxel coordinates) and det of the forward Jacobian."""

    forward: np.ndarray
    inverse: np.ndarray
    jac_det: np.ndarray = field(default=None)

    def __post_init__(self):
        self.forward = np.asarray(self.forward, dtype=np.float64)
        self.inverse = np.asarray(self.inverse, dtype=np.float64)
        if self.forward.shape != self.inverse.shape or self.forward.shape[-1:] != (3,):
            raise InvalidInputError(
                f"forward {self.forward.shape} and inverse {self.inverse.shape} must both be (nx, ny, nz, 3)"
            )
        if self.jac_det is None:
            self.jac_det = jacobian_determinants(self.forward)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.forward.shape[:3])

    @classmethod
    def identity(cls, dims) -> "DeformationField":
        ident = identity_map(dims)
        return cls(ident, ident.copy(), np.ones(tuple(dims)))

    def check_invertible(self) -> None:
        """Raise FoldoverError at the voxel with the smallest determinant if any is <= 0."""
        worst = np.unravel_index(int(np.argmin(self.jac_det)), self.jac_det.shape)
        if self.jac_det[worst] <= 0:
            raise FoldoverError(worst, self.jac_det[worst])

    def inverse_consistency(self) -> float:
        """Max-norm distance of forward(inverse(y)) from y, in voxels."""
        roundtrip = compose_maps(self.forward, self.inverse)
        return float(np.max(np.abs(roundtrip - identity_map(self.dims))))


FieldLike = Union[VolumeGrid, VectorField, np.ndarray]


def _field_array(field_: FieldLike) -> np.ndarray:
    if isinstance(field_, VolumeGrid):
        arr = field_.values
    elif isinstance(field_, VectorField):
        arr = field_.vectors
    else:
        arr = np.asarray(field_, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[..., None]
    if arr.ndim != 4 or arr.size == 0:
        raise InvalidInputError(f"cannot sample an empty or malformed field of shape {arr.shape}")
    return arr


def identity_map(dims) -> np.ndarray:
    """(nx, ny, nz, 3) array holding each voxel's own index."""
    return np.moveaxis(np.indices(tuple(int(n) for n in dims), dtype=np.float64), 0, -1)


def sample_trilinear(field_: FieldLike, coords: np.ndarray) -> np.ndarray:
    """Trilinear values at voxel coordinates with clamp-to-edge.

    coords has shape (..., 3); the result has shape (..., channels).
    """
    arr = _field_array(field_)
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[-1] != 3:
        raise InvalidInputError(f"coordinates must end in a 3-axis, got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise InvalidInputError("sampling coordinates must be finite")
    lead = coords.shape[:-1]
    points = coords.reshape(-1, 3).T
    out = np.empty((points.shape[1], arr.shape[3]))
    for c in range(arr.shape[3]):
        out[:, c] = ndimage.map_coordinates(arr[..., c], points, order=1, mode="nearest")
    return out.reshape(lead + (arr.shape[3],))


def _axis_weights(c: np.ndarray, n: int):
    """Lower index, upper index, upper weight and d(weight)/dc along one axis."""
    if n == 1:
        zeros = np.zeros(c.shape, dtype=np.intp)
        return zeros, zeros, np.zeros_like(c), np.zeros_like(c)
    clamped = np.clip(c, 0.0, n - 1.0)
    lower = np.minimum(np.floor(clamped).astype(np.intp), n - 2)
    frac = clamped - lower
    # clamping flattens the interpolant outside the grid
    slope = ((c >= 0.0) & (c <= n - 1.0)).astype(np.float64)
    return lower, lower + 1, frac, slope


def sample_trilinear_with_gradient(field_: FieldLike, coords: np.ndarray):
    """Values and exact coordinate derivatives of the trilinear interpolant.

    Returns (values (M, C), gradient (M, C, 3)) for coords of shape (M, 3);
    gradient is per voxel unit.
    """
    arr = _field_array(field_)
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(coords)):
        raise InvalidInputError("sampling coordinates must be finite")

    axes = [_axis_weights(coords[:, a], arr.shape[a]) for a in range(3)]
    values = np.zeros((coords.shape[0], arr.shape[3]))
    grad = np.zeros((coords.shape[0], arr.shape[3], 3))
    for cx in (0, 1):
        ix = axes[0][cx]
        wx = axes[0][2] if cx else 1.0 - axes[0][2]
        dx = axes[0][3] if cx else -axes[0][3]
        for cy in (0, 1):
            iy = axes[1][cy]
            wy = axes[1][2] if cy else 1.0 - axes[1][2]
            dy = axes[1][3] if cy else -axes[1][3]
            for cz in (0, 1):
                iz = axes[2][cz]
                wz = axes[2][2] if cz else 1.0 - axes[2][2]
                dz = axes[2][3] if cz else -axes[2][3]
                corner = arr[ix, iy, iz]
                values += (wx * wy * wz)[:, None] * corner
                grad[..., 0] += (dx * wy * wz)[:, None] * corner
                grad[..., 1] += (wx * dy * wz)[:, None] * corner
                grad[..., 2] += (wx * wy * dz)[:, None] * corner
    return values, grad


def spatial_gradient(field_: FieldLike, spacing=None) -> np.ndarray:
    """Per-channel gradient, (nx, ny, nz, C, 3), scaled by 1/spacing.

    Central differences inside, one-sided at the faces.
    """
    arr = _field_array(field_)
    if spacing is None:
        spacing = getattr(field_, "spacing", (1.0, 1.0, 1.0))
    spacing = _as_spacing(spacing)
    if min(arr.shape[:3]) < 2:
        raise InvalidInputError(f"spatial_gradient needs >= 2 voxels per axis, got {arr.shape[:3]}")
    parts = np.gradient(arr, *spacing, axis=(0, 1, 2))
    return np.stack(parts, axis=-1)


def jacobian_matrices(mapping: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """J[..., i, j] = d mapping_i / d x_j, shape (nx, ny, nz, 3, 3)."""
    mapping = np.asarray(mapping, dtype=np.float64)
    if mapping.ndim != 4 or mapping.shape[3] != 3:
        raise InvalidInputError(f"map must be (nx, ny, nz, 3), got {mapping.shape}")
    return spatial_gradient(mapping, spacing)


def jacobian_determinants(mapping) -> np.ndarray:
    """Per-voxel det of the central-difference Jacobian of a voxel-to-voxel map."""
    if isinstance(mapping, VectorField):
        mapping = mapping.vectors
    return np.linalg.det(jacobian_matrices(mapping))


def compose_maps(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """outer(inner(y)) for voxel-coordinate maps on the same grid.

    outer is sampled as a displacement so points leaving the grid keep the
    edge displacement instead of snapping to the edge coordinate.
    """
    outer = np.asarray(outer, dtype=np.float64)
    displacement = outer - identity_map(outer.shape[:3])
    return inner + sample_trilinear(displacement, inner)


def invert_displacement(displacement: np.ndarray, guess: Optional[np.ndarray] = None,
                        max_iter: int = 20, tol: float = 1e-8) -> np.ndarray:
    """Map p with p(y) + displacement(p(y)) = y, by Newton iteration per voxel.

    The displacement is sampled like compose_maps samples it, so the
    forward(inverse) round trip equals the final Newton residual. Voxels
    whose interpolated Jacobian is near singular take a fixed-point step.
    """
    displacement = np.asarray(displacement, dtype=np.float64)
    if displacement.ndim != 4 or displacement.shape[3] != 3:
        raise InvalidInputError(f"displacement must be (nx, ny, nz, 3), got {displacement.shape}")
    dims = displacement.shape[:3]
    target = identity_map(dims).reshape(-1, 3)
    if guess is None:
        points = target - displacement.reshape(-1, 3)
    else:
        points = np.array(guess, dtype=np.float64).reshape(-1, 3)
    for _ in range(max_iter):
        values, grad = sample_trilinear_with_gradient(displacement, points)
        residual = points + values - target
        if float(np.max(np.abs(residual))) <= tol:
            break
        jac = grad + np.eye(3)
        step = residual.copy()
        regular = np.linalg.det(jac) > 1e-3
        step[regular] = np.linalg.solve(jac[regular], residual[regular][..., None])[..., 0]
        points = points - np.clip(step, -1.0, 1.0)
    return points.reshape(dims + (3,))


def compose(outer: DeformationField, inner: DeformationField) -> DeformationField:
    """(outer o inner) with inverse inner^-1 o outer^-1 and recomputed jac_det."""
    if outer.dims != inner.dims:
        raise InvalidInputError(f"cannot compose maps on grids {outer.dims} and {inner.dims}")
    forward = compose_maps(outer.forward, inner.forward)
    inverse = compose_maps(inner.inverse, outer.inverse)
    return DeformationField(forward, inverse)
