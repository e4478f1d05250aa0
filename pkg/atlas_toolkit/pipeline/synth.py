"""Synthetic datasets drawn from a known atlas, with ground truth for every latent quantity.

Each subject is the true template pushed through a small random velocity and
affine, rendered with class means, multiplied by a smooth nonuniformity g and
corrupted by additive Gaussian noise.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.special import softmax

from ..core.errors import InvalidInputError
from ..core.utils import make_rng
from ..geometry.grid import DeformationField, GridSpec, VolumeGrid, sample_trilinear
from ..geometry.volume_io import write_mvol
from ..mixture.responsibilities import warped_prior
from ..registration.affine import AffineParams
from ..registration.matching import map_points
from ..registration.operator import OperatorSpec
from ..registration.shooting import geodesic_shoot
from ..template import TissueAtlas
from .outputs import write_affine
from .state import SubjectData

logger = logging.getLogger("atlas-toolkit")

# full width of the multiplicative field: 0.2 -> g in [0.9, 1.1]
PRESETS = {"bias20": 0.2, "bias40": 0.4}
NOISE_LEVELS = (1, 3, 7)
MANIFEST_FILE = "manifest.txt"


@dataclass
class SynthSpec:
    subjects: int = 3
    dims: tuple[int, int, int] = (16, 16, 16)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    classes: int = 3
    channels: int = 1
    bias_range: float = 0.2
    noise_percent: float = 3.0
    warp_mm: float = 1.0
    rotation: float = 0.03
    zoom: float = 0.02
    shear: float = 0.01
    translation_mm: float = 1.0
    mean_jitter: float = 0.05
    brightest: float = 100.0
    atlas_sharpness: float = 12.0
    atlas_noise: float = 0.5

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        if self.subjects < 1:
            raise InvalidInputError(f"subjects must be >= 1, got {self.subjects}")
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise InvalidInputError(f"dims must be 3 integers >= 4, got {self.dims}")
        if self.classes < 2 or self.channels < 1:
            raise InvalidInputError("need at least 2 classes and 1 channel")
        if not 0.0 <= self.bias_range < 2.0:
            raise InvalidInputError(f"bias_range must be in [0, 2), got {self.bias_range}")
        if self.noise_percent < 0:
            raise InvalidInputError(f"noise_percent must be >= 0, got {self.noise_percent}")

    @classmethod
    def from_preset(cls, preset: str, noise: float, **kwargs) -> "SynthSpec":
        if preset not in PRESETS:
            raise InvalidInputError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        return cls(bias_range=PRESETS[preset], noise_percent=float(noise), **kwargs)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.dims, self.spacing)

    def base_means(self) -> np.ndarray:
        """(K, D) class means; odd channels reverse the contrast."""
        ramp = self.brightest * (0.1 + 0.9 * np.arange(self.classes) / (self.classes - 1))
        return np.stack([ramp if c % 2 == 0 else ramp[::-1] for c in range(self.channels)], axis=1)


@dataclass
class SubjectTruth:
    name: str
    labels: np.ndarray          # (nx, ny, nz) 1-based classes
    prior: np.ndarray           # (nx, ny, nz, K) true warped template
    bias: np.ndarray            # (nx, ny, nz, D) multiplicative nonuniformity g
    deformation: DeformationField
    affine: AffineParams
    means: np.ndarray           # (K, D)
    noise_sd: np.ndarray        # (D,)


@dataclass
class SynthDataset:
    spec: SynthSpec
    seed: int
    atlas: TissueAtlas
    subjects: list[SubjectData] = field(default_factory=list)
    truth: list[SubjectTruth] = field(default_factory=list)


def _smooth_noise(rng: np.random.Generator, dims, sigma: float) -> np.ndarray:
    field_ = ndimage.gaussian_filter(rng.standard_normal(dims), sigma, mode="wrap")
    return field_ / max(float(np.max(np.abs(field_))), 1e-12)


def synth_atlas(spec: SynthSpec, seed: int) -> TissueAtlas:
    """Concentric shells (outermost = class 1) with smoothly perturbed boundaries."""
    rng = make_rng(seed, "atlas")
    grid = spec.grid
    points = grid.voxel_points_mm().reshape(tuple(grid.dims) + (3,))
    extent = np.asarray(grid.dims) * np.asarray(grid.spacing)
    radius = np.linalg.norm(points / (0.5 * extent), axis=3)
    centres = np.linspace(1.2, 0.0, spec.classes)
    logits = np.stack(
        [-spec.atlas_sharpness * (radius - c) ** 2 + spec.atlas_noise * _smooth_noise(rng, grid.dims, 2.0)
         for c in centres],
        axis=3,
    )
    return TissueAtlas(softmax(logits, axis=3), grid.spacing)


def _random_velocity(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    sigma = max(spec.dims) / 6.0
    u = np.stack([_smooth_noise(rng, spec.dims, sigma) for _ in range(3)], axis=3)
    return spec.warp_mm * u


def _random_affine(spec: SynthSpec, rng: np.random.Generator) -> AffineParams:
    scales = np.array([spec.rotation] * 3 + [spec.zoom] * 3 + [spec.shear] * 3)
    return AffineParams(rng.standard_normal(9) * scales, rng.standard_normal(3) * spec.translation_mm)


def bias_field(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """(nx, ny, nz, D) smooth field with values in [1 - r/2, 1 + r/2]."""
    sigma = max(spec.dims) / 4.0
    channels = []
    for _ in range(spec.channels):
        f = ndimage.gaussian_filter(rng.standard_normal(spec.dims), sigma, mode="nearest")
        f = f - f.mean()
        f = f / max(float(np.max(np.abs(f))), 1e-12)
        channels.append(1.0 + 0.5 * spec.bias_range * f)
    return np.stack(channels, axis=3)


def synth_subject(spec: SynthSpec, atlas: TissueAtlas, seed: int, index: int) -> tuple[SubjectData, SubjectTruth]:
    name = f"subj{index + 1:03d}"
    grid = spec.grid
    dims = tuple(grid.dims)
    operator = OperatorSpec(spacing=grid.spacing)

    deformation = geodesic_shoot(_random_velocity(spec, make_rng(seed, "velocity", index)), operator)
    affine = _random_affine(spec, make_rng(seed, "affine", index))
    xi = map_points(deformation.forward, grid, affine.matrix, affine.t)
    raw = sample_trilinear(atlas.pi, atlas.grid.to_voxel(xi))
    prior = warped_prior(raw, np.ones(atlas.K))
    z = np.argmax(prior, axis=1)

    means = spec.base_means() * (1.0 + spec.mean_jitter * make_rng(seed, "means", index).standard_normal((spec.classes, 1)))
    clean = means[z].reshape(dims + (spec.channels,))
    g = bias_field(spec, make_rng(seed, "bias", index))
    noise_sd = spec.noise_percent / 100.0 * means.max(axis=0)
    noise = make_rng(seed, "noise", index).standard_normal(clean.shape) * noise_sd
    values = clean * g + noise

    truth = SubjectTruth(
        name=name,
        labels=(z + 1).reshape(dims).astype(np.int32),
        prior=prior.reshape(dims + (atlas.K,)),
        bias=g,
        deformation=deformation,
        affine=affine,
        means=means,
        noise_sd=noise_sd,
    )
    return SubjectData(name, VolumeGrid(values, grid.spacing)), truth


def synthesize_dataset(spec: SynthSpec, seed: int = 0, atlas: Optional[TissueAtlas] = None) -> SynthDataset:
    """Draw a template and spec.subjects subjects; every random draw comes from its own seeded stream."""
    atlas = atlas or synth_atlas(spec, seed)
    if atlas.K != spec.classes:
        raise InvalidInputError(f"atlas has {atlas.K} classes, spec asks for {spec.classes}")
    dataset = SynthDataset(spec, seed, atlas)
    for i in range(spec.subjects):
        data, truth = synth_subject(spec, atlas, seed, i)
        dataset.subjects.append(data)
        dataset.truth.append(truth)
    logger.info(
        "Synthesized %d subjects on %s (bias range %.2f, noise %.1f%%)",
        spec.subjects, spec.dims, spec.bias_range, spec.noise_percent,
    )
    return dataset


def write_synth_dataset(dataset: SynthDataset, out_dir: str | Path) -> Path:
    """Subjects plus ground truth, and a manifest listing the subject volumes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spacing = dataset.spec.spacing
    write_mvol(out_dir / "atlas_true.mvol", VolumeGrid(dataset.atlas.pi, spacing))
    summary = {"seed": dataset.seed, "spec": {k: v for k, v in vars(dataset.spec).items()}, "subjects": []}
    manifest = ["# synthetic subjects; ground truth labels are <name>.labels.mvol"]
    for data, truth in zip(dataset.subjects, dataset.truth):
        write_mvol(out_dir / f"{data.name}.mvol", data.volume)
        write_mvol(out_dir / f"{data.name}.labels.mvol", VolumeGrid(truth.labels.astype(np.float64), spacing))
        write_mvol(out_dir / f"{data.name}.truth.mvol", VolumeGrid(truth.prior, spacing))
        write_mvol(out_dir / f"{data.name}.bias.mvol", VolumeGrid(truth.bias, spacing))
        write_mvol(out_dir / f"{data.name}.warp.mvol", VolumeGrid(truth.deformation.forward, spacing))
        write_affine(out_dir / f"{data.name}.affine.txt", truth.affine.to_homogeneous())
        manifest.append(f"{data.name}.mvol")
        summary["subjects"].append({
            "name": data.name,
            "means": truth.means.tolist(),
            "noise_sd": truth.noise_sd.tolist(),
            "affine": truth.affine.a.tolist(),
            "translation": truth.affine.t.tolist(),
        })
    (out_dir / MANIFEST_FILE).write_text("\n".join(manifest) + "\n", encoding="utf-8")
    with open(out_dir / "truth.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    logger.info("Wrote synthetic dataset to %s", out_dir)
    return out_dir
