"""Subject discovery: manifests and directories of volumes.

Manifest lines (UTF-8, # comments):

    t1.nii+t2.nii                     two channels
    t1.nii+-,labels.mvol,0.9          second channel missing, labels with zeta 0.9
"""

import logging
from pathlib import Path
from typing import Optional

import numpy as np

from ..core.errors import FileFormatError, InvalidInputError
from ..geometry.grid import VolumeGrid
from ..geometry.volume_io import is_nifti, load_volume
from ..mixture.responsibilities import LabelData
from .state import SubjectData

logger = logging.getLogger("atlas-toolkit")

MISSING = "-"
DERIVED_MARKERS = (".labels.", ".bias.", ".warp.", ".truth.", ".seg.", ".velocity.", ".alpha.")
MANIFEST_NAMES = ("manifest.txt", "manifest")


def _subject_name(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii", ".mvol"):
        if name.lower().endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def _resolve(base: Path, entry: str) -> Path:
    path = Path(entry).expanduser()
    return path if path.is_absolute() else base / path


def load_channels(paths: list[Optional[Path]]) -> VolumeGrid:
    """Stack single- or multi-channel volumes; None entries become fully missing channels."""
    loaded = [load_volume(p) if p is not None else None for p in paths]
    present = [v for v in loaded if v is not None]
    if not present:
        raise InvalidInputError("a subject needs at least one observed channel")
    ref = present[0]
    values, missing = [], []
    for v in loaded:
        if v is None:
            values.append(np.zeros(ref.dims + (1,)))
            missing.append(np.ones(ref.dims + (1,), dtype=bool))
            continue
        if v.dims != ref.dims:
            raise InvalidInputError(f"channel grids differ: {v.dims} vs {ref.dims}")
        values.append(v.values)
        missing.append(v.missing_mask)
    return VolumeGrid(np.concatenate(values, axis=3), ref.spacing, np.concatenate(missing, axis=3))


def load_labels(path: Path, zeta: float) -> LabelData:
    volume = load_volume(path)
    labels = np.rint(volume.values[..., 0]).astype(np.int64)
    labels[volume.missing_mask[..., 0]] = 0
    return LabelData(labels, zeta)


def load_manifest(path: str | Path, default_zeta: float = 0.95) -> list[SubjectData]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    base = path.parent
    subjects = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            fields = [part.strip() for part in line.split(",")]
            if len(fields) > 3:
                raise FileFormatError(f"{path}:{lineno}: expected 'channels[,labels[,zeta]]'")
            channels = [None if c == MISSING else _resolve(base, c) for c in fields[0].split("+")]
            data = load_channels(channels)
            first = next(c for c in channels if c is not None)
            labels = None
            if len(fields) > 1 and fields[1] and fields[1] != MISSING:
                try:
                    zeta = float(fields[2]) if len(fields) > 2 and fields[2] else default_zeta
                except ValueError:
                    raise FileFormatError(f"{path}:{lineno}: bad zeta {fields[2]!r}") from None
                labels = load_labels(_resolve(base, fields[1]), zeta)
            sources = [str(c) if c is not None else MISSING for c in channels]
            subjects.append(SubjectData(_subject_name(first), data, labels, sources))
    if not subjects:
        raise InvalidInputError(f"{path}: manifest lists no subjects")
    _dedupe_names(subjects)
    logger.info("Loaded %d subjects from %s", len(subjects), path)
    return subjects


def _dedupe_names(subjects: list[SubjectData]) -> None:
    seen: dict[str, int] = {}
    for s in subjects:
        count = seen.get(s.name, 0)
        seen[s.name] = count + 1
        if count:
            s.name = f"{s.name}_{count}"


def _is_volume(path: Path) -> bool:
    name = path.name.lower()
    return (name.endswith(".mvol") or is_nifti(name)) and not any(m in name for m in DERIVED_MARKERS)


def load_subjects(source: str | Path, labels_dir: Optional[str | Path] = None,
                  zeta: float = 0.95) -> list[SubjectData]:
    """Subjects from a manifest file, or a directory (its manifest if present, else every volume)."""
    source = Path(source)
    if source.is_file():
        subjects = load_manifest(source, zeta)
    elif source.is_dir():
        manifest = next((source / n for n in MANIFEST_NAMES if (source / n).is_file()), None)
        if manifest is not None:
            subjects = load_manifest(manifest, zeta)
        else:
            files = sorted(p for p in source.iterdir() if p.is_file() and _is_volume(p))
            if not files:
                raise InvalidInputError(f"No volumes found in {source}")
            subjects = [SubjectData(_subject_name(p), load_channels([p]), None, [str(p)]) for p in files]
    else:
        raise FileNotFoundError(f"Input not found: {source}")

    if labels_dir is not None:
        labels_dir = Path(labels_dir)
        for s in subjects:
            matches = sorted(p for p in labels_dir.glob(f"{s.name}.labels.*") if p.is_file())
            if matches:
                s.labels = load_labels(matches[0], zeta)
            else:
                logger.debug("No labels for %s in %s", s.name, labels_dir)
    return subjects
