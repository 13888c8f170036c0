"""Dataset handling: preprocessing, augmentation, splits, disk layout, and
the synthetic phantom generator."""

from .pipeline import normalize, resize, batch_from_pairs, prepare_pairs
from .dataset import (
    SamplePair,
    DatasetSplit,
    save_dataset,
    load_dataset,
    split_dataset,
    carve_validation,
)
from .augment import AugmentParams, sample_augment_params, apply_augment, augment
from .phantom import (
    PhantomSpec,
    render_frame,
    generate_phantoms,
    generate_dataset,
    default_phantom_spec,
)

__all__ = [
    "normalize",
    "resize",
    "batch_from_pairs",
    "prepare_pairs",
    "SamplePair",
    "DatasetSplit",
    "save_dataset",
    "load_dataset",
    "split_dataset",
    "carve_validation",
    "AugmentParams",
    "sample_augment_params",
    "apply_augment",
    "augment",
    "PhantomSpec",
    "render_frame",
    "generate_phantoms",
    "generate_dataset",
    "default_phantom_spec",
]
