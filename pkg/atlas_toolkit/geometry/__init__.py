from .grid import (
    DeformationField,
    GridSpec,
    VectorField,
    VolumeGrid,
    compose,
    compose_maps,
    identity_map,
    invert_displacement,
    jacobian_determinants,
    jacobian_matrices,
    sample_trilinear,
    sample_trilinear_with_gradient,
    spatial_gradient,
)
from .volume_io import (
    load_volume,
    read_mvol,
    read_nifti,
    write_mvol,
    write_nifti,
    write_vector_field,
)

__all__ = [
    "DeformationField",
    "GridSpec",
    "VectorField",
    "VolumeGrid",
    "compose",
    "compose_maps",
    "identity_map",
    "invert_displacement",
    "jacobian_determinants",
    "jacobian_matrices",
    "sample_trilinear",
    "sample_trilinear_with_gradient",
    "spatial_gradient",
    "load_volume",
    "read_mvol",
    "read_nifti",
    "write_mvol",
    "write_nifti",
    "write_vector_field",
]
