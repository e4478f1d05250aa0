"""Reading and writing trained atlases and per-subject results."""

import json
import logging
from pathlib import Path

import numpy as np

from ..core.errors import FileFormatError
from ..geometry.grid import VolumeGrid
from ..geometry.volume_io import read_mvol, write_mvol, write_nifti
from ..mixture.gauss_wishart import GaussWishartBundle
from ..template import TissueAtlas
from .state import SubjectState

logger = logging.getLogger("atlas-toolkit")

ATLAS_FILE = "atlas.mvol"
SIDECAR_FILE = "atlas.txt"
HYPERPRIOR_FILE = "hyperpriors.json"
ALPHA_FILE = "atlas.alpha.mvol"


def save_atlas(out_dir: str | Path, atlas: TissueAtlas, hyperprior: GaussWishartBundle,
               alpha: np.ndarray = None, nifti: bool = False) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_mvol(out_dir / ATLAS_FILE, VolumeGrid(atlas.pi, atlas.spacing))
    lines = [
        "# tissue atlas sidecar",
        f"classes = {atlas.K}",
        f"alpha0 = {','.join(repr(float(a)) for a in atlas.alpha0)}",
        f"class_names = {','.join(atlas.class_names)}",
    ]
    (out_dir / SIDECAR_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    with open(out_dir / HYPERPRIOR_FILE, "w", encoding="utf-8") as f:
        json.dump(hyperprior.to_dict(), f, indent=2)
    if alpha is not None:
        write_mvol(out_dir / ALPHA_FILE, VolumeGrid(np.asarray(alpha).reshape(atlas.pi.shape), atlas.spacing))
    if nifti:
        for k in range(atlas.K):
            write_nifti(out_dir / f"atlas_class{k + 1}.nii", atlas.pi[..., k], atlas.spacing)
    return out_dir


def _read_sidecar(path: Path) -> dict[str, str]:
    values = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if "=" in line:
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def load_atlas(atlas_dir: str | Path) -> tuple[TissueAtlas, GaussWishartBundle]:
    atlas_dir = Path(atlas_dir)
    volume = read_mvol(atlas_dir / ATLAS_FILE)
    sidecar_path = atlas_dir / SIDECAR_FILE
    sidecar = _read_sidecar(sidecar_path) if sidecar_path.exists() else {}
    K = volume.channels
    if "classes" in sidecar and int(sidecar["classes"]) != K:
        raise FileFormatError(f"{sidecar_path}: classes = {sidecar['classes']} but atlas has {K} channels")
    alpha0 = None
    if sidecar.get("alpha0"):
        alpha0 = np.array([float(a) for a in sidecar["alpha0"].split(",")])
    names = [n for n in sidecar.get("class_names", "").split(",") if n]
    pi = volume.values / volume.values.sum(axis=3, keepdims=True)
    atlas = TissueAtlas(pi, volume.spacing, alpha0, names)

    hyper_path = atlas_dir / HYPERPRIOR_FILE
    if not hyper_path.exists():
        raise FileNotFoundError(f"Intensity hyperpriors not found: {hyper_path}")
    with open(hyper_path, "r", encoding="utf-8") as f:
        try:
            hyperprior = GaussWishartBundle.from_dict(json.load(f))
        except (json.JSONDecodeError, KeyError) as e:
            raise FileFormatError(f"{hyper_path}: {e}") from e
    return atlas, hyperprior


def write_affine(path: str | Path, matrix: np.ndarray) -> Path:
    path = Path(path)
    np.savetxt(path, np.asarray(matrix).reshape(4, 4), fmt="%.12g")
    return path


def write_subject_outputs(out_dir: str | Path, state: SubjectState, gamma: np.ndarray = None,
                          write_bias: bool = False, write_warp: bool = False,
                          write_velocity: bool = False) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dims = tuple(state.grid.dims)
    spacing = state.grid.spacing
    gamma = state.gamma if gamma is None else gamma
    written = [
        write_affine(out_dir / f"{state.name}.affine.txt", state.affine.to_homogeneous()),
        write_mvol(out_dir / f"{state.name}.seg.mvol", VolumeGrid(gamma.reshape(dims + (-1,)), spacing)),
    ]
    if write_bias:
        written.append(write_mvol(out_dir / f"{state.name}.bias.mvol",
                                  VolumeGrid(state.bias_field().reshape(dims + (-1,)), spacing)))
    if write_warp:
        written.append(write_mvol(out_dir / f"{state.name}.warp.mvol", VolumeGrid(state.deformation.forward, spacing)))
    if write_velocity:
        written.append(write_mvol(out_dir / f"{state.name}.velocity.mvol", VolumeGrid(state.velocity.u, spacing)))
    return written
