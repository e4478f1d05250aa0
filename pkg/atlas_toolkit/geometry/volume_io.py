"""Volume files: the MVOL container and NIfTI-1 via nibabel.

MVOL layout (little-endian):
    magic "MVOL" | u32 version | u32 dims[3] | u32 channels | f32 spacing[3]
    then channels x N float32 values, x fastest, NaN marking missing entries.
"""

import logging
from pathlib import Path

import nibabel as nib
import numpy as np

from ..core.errors import FileFormatError
from .grid import VectorField, VolumeGrid

logger = logging.getLogger("atlas-toolkit")

MVOL_MAGIC = b"MVOL"
MVOL_VERSION = 1

MVOL_HEADER = np.dtype(
    [
        ("magic", "S4"),
        ("version", "<u4"),
        ("dims", "<u4", (3,)),
        ("channels", "<u4"),
        ("spacing", "<f4", (3,)),
    ]
)

# uint8, int16, int32, float32, float64
NIFTI_DATATYPES = {2: "uint8", 4: "int16", 8: "int32", 16: "float32", 64: "float64"}
ACCEPTED_NIFTI_DATATYPES = (4, 8, 16, 64)

NIFTI_SUFFIXES = (".nii", ".nii.gz")


def write_mvol(path: str | Path, volume: VolumeGrid) -> Path:
    """Write a VolumeGrid, encoding missing entries as NaN."""
    path = Path(path)
    header = np.zeros((), dtype=MVOL_HEADER)
    header["magic"] = MVOL_MAGIC
    header["version"] = MVOL_VERSION
    header["dims"] = volume.dims
    header["channels"] = volume.channels
    header["spacing"] = volume.spacing

    data = np.where(volume.missing_mask, np.nan, volume.values).astype("<f4")
    # channel-major blocks, each in x-fastest (Fortran) order
    payload = np.concatenate([data[..., c].ravel(order="F") for c in range(volume.channels)])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(payload.tobytes())
    return path


def read_mvol(path: str | Path) -> VolumeGrid:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Volume not found: {path}")
    raw = path.read_bytes()
    if len(raw) < MVOL_HEADER.itemsize:
        raise FileFormatError(f"{path}: too short for an MVOL header")
    header = np.frombuffer(raw[: MVOL_HEADER.itemsize], dtype=MVOL_HEADER)[0]
    if header["magic"] != MVOL_MAGIC:
        raise FileFormatError(f"{path}: bad magic {header['magic']!r}, expected {MVOL_MAGIC!r}")
    if header["version"] != MVOL_VERSION:
        raise FileFormatError(f"{path}: unsupported MVOL version {int(header['version'])}")

    dims = tuple(int(n) for n in header["dims"])
    channels = int(header["channels"])
    n = int(np.prod(dims))
    payload = np.frombuffer(raw[MVOL_HEADER.itemsize:], dtype="<f4")
    if payload.size != n * channels or n == 0 or channels == 0:
        raise FileFormatError(
            f"{path}: expected {n * channels} values for dims {dims} x {channels}, found {payload.size}"
        )
    blocks = payload.reshape(channels, n).astype(np.float64)
    values = np.stack([blocks[c].reshape(dims, order="F") for c in range(channels)], axis=-1)
    return VolumeGrid(values, tuple(float(s) for s in header["spacing"]), np.isnan(values))


def write_vector_field(path: str | Path, field_: VectorField) -> Path:
    return write_mvol(path, VolumeGrid(field_.vectors, field_.spacing))


def read_nifti(path: str | Path) -> VolumeGrid:
    """NIfTI-1 reader: int16/int32/float32/float64 with scl_slope/scl_inter applied."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Volume not found: {path}")
    try:
        img = nib.load(str(path))
    except Exception as e:
        raise FileFormatError(f"{path}: not a readable NIfTI file ({e})") from e
    if not isinstance(img, nib.Nifti1Image):
        raise FileFormatError(f"{path}: only NIfTI-1 single files are supported")

    code = int(img.header["datatype"])
    if code not in ACCEPTED_NIFTI_DATATYPES:
        name = NIFTI_DATATYPES.get(code, f"code {code}")
        raise FileFormatError(
            f"{path}: unsupported NIfTI datatype {name}; accepted: int16, int32, float32, float64"
        )

    # get_fdata applies scl_slope / scl_inter
    data = img.get_fdata(dtype=np.float64)
    if data.ndim == 5 and data.shape[3] == 1:
        data = data[:, :, :, 0, :]
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim not in (3, 4):
        raise FileFormatError(f"{path}: cannot interpret NIfTI shape {data.shape}")
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    spacing = tuple(s if s > 0 else 1.0 for s in spacing) + (1.0,) * (3 - len(spacing))
    logger.debug("Read NIfTI %s: shape=%s spacing=%s", path, data.shape, spacing)
    return VolumeGrid(data, spacing[:3])


def write_nifti(path: str | Path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> Path:
    path = Path(path)
    affine = np.diag([float(spacing[0]), float(spacing[1]), float(spacing[2]), 1.0])
    img = nib.Nifti1Image(np.asarray(data, dtype=np.float32), affine)
    path.parent.mkdir(parents=True, exist_ok=True)
    nib.save(img, str(path))
    return path


def is_nifti(path: str | Path) -> bool:
    return str(path).lower().endswith(NIFTI_SUFFIXES)


def load_volume(path: str | Path) -> VolumeGrid:
    """Dispatch on suffix: .mvol or .nii / .nii.gz."""
    if str(path).lower().endswith(".mvol"):
        return read_mvol(path)
    if is_nifti(path):
        return read_nifti(path)
    raise FileFormatError(f"{path}: unknown volume format (expected .mvol, .nii or .nii.gz)")
