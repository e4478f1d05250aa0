from .bound import LowerBound, compute_lower_bound, subject_bound_terms
from .dataset import load_channels, load_labels, load_manifest, load_subjects
from .fit import GroupwiseFit, Segmentation, fit_groupwise, segment_unseen, subject_sweep
from .ledger import BoundLedger, LedgerEntry
from .metrics import dice_score, hard_segmentation, pearson_correlation, per_class_dice
from .outputs import load_atlas, save_atlas, write_affine, write_subject_outputs
from .state import SubjectData, SubjectState
from .synth import PRESETS, SynthDataset, SynthSpec, synthesize_dataset, write_synth_dataset

__all__ = [
    "LowerBound",
    "compute_lower_bound",
    "subject_bound_terms",
    "load_channels",
    "load_labels",
    "load_manifest",
    "load_subjects",
    "GroupwiseFit",
    "Segmentation",
    "fit_groupwise",
    "segment_unseen",
    "subject_sweep",
    "BoundLedger",
    "LedgerEntry",
    "dice_score",
    "hard_segmentation",
    "pearson_correlation",
    "per_class_dice",
    "load_atlas",
    "save_atlas",
    "write_affine",
    "write_subject_outputs",
    "SubjectData",
    "SubjectState",
    "PRESETS",
    "SynthDataset",
    "SynthSpec",
    "synthesize_dataset",
    "write_synth_dataset",
]
