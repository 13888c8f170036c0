"""Sample pairs, the on-disk dataset layout, and seeded splits.

Disk layout written by save_dataset:

    <root>/images/<source_id>/<frame>.png    8-bit grayscale
    <root>/masks/<source_id>/<frame>.png     8-bit, values 0 and 255
    <root>/manifest.json                     ordered pair list + generator info
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from ..errors import ConfigurationError, DimensionError, ValidationError


@dataclass
class SamplePair:
    image: np.ndarray
    mask: np.ndarray
    source_id: str
    frame_index: int

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.mask = np.asarray(self.mask)
        if self.image.shape != self.mask.shape:
            raise DimensionError(
                f"image shape {self.image.shape} does not match mask "
                f"shape {self.mask.shape}")
        if self.image.dtype != np.uint8 or self.mask.dtype != np.uint8:
            raise ValidationError("image and mask must be 8-bit rasters")
        values = np.unique(self.mask)
        if not np.all(np.isin(values, (0, 255))):
            raise ValidationError(
                f"mask must contain only 0 and 255, found values {values[:5]}")


@dataclass
class DatasetSplit:
    train: list
    test: list
    seed: int = 0


def _png_path(root, kind, pair):
    return os.path.join(root, kind, pair.source_id, f"{pair.frame_index:03d}.png")


def save_dataset(pairs, root, *, generator_info=None, seed=None):
    """Write pairs as PNGs plus a manifest; byte-identical for equal inputs."""
    if not pairs:
        raise ConfigurationError("refusing to write an empty dataset")
    manifest = {"pairs": [], "generator": generator_info, "seed": seed}
    for pair in pairs:
        image_path = _png_path(root, "images", pair)
        mask_path = _png_path(root, "masks", pair)
        for path, raster in ((image_path, pair.image), (mask_path, pair.mask)):
            os.makedirs(os.path.dirname(path), exist_ok=True)
            Image.fromarray(raster, mode="L").save(path)
        manifest["pairs"].append({
            "source_id": pair.source_id,
            "frame_index": pair.frame_index,
            "image": os.path.relpath(image_path, root),
            "mask": os.path.relpath(mask_path, root),
        })
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return os.path.join(root, "manifest.json")


def load_dataset(root):
    """Read pairs back in manifest order."""
    manifest_path = os.path.join(root, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ConfigurationError(f"{root}: no manifest.json; not a dataset directory")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    pairs = []
    for entry in manifest["pairs"]:
        image = np.asarray(Image.open(os.path.join(root, entry["image"])))
        mask = np.asarray(Image.open(os.path.join(root, entry["mask"])))
        pairs.append(SamplePair(image, mask, entry["source_id"], entry["frame_index"]))
    return pairs


def split_dataset(pairs, ratio=0.75, seed=0, by_source=False):
    """Seeded shuffle followed by a train/test split.

    The default splits at image level with floor(ratio * n) training pairs,
    so 617 pairs at 0.75 give 462/155. ``by_source`` splits whole blastocysts
    instead, keeping all frames of one subject on the same side.
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ConfigurationError(
            f"need at least 2 pairs to split, got {len(pairs)}")
    if not 0 < ratio < 1:
        raise ConfigurationError(f"split ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    if by_source:
        sources = list(dict.fromkeys(p.source_id for p in pairs))
        order = [sources[i] for i in rng.permutation(len(sources))]
        n_train = int(ratio * len(order))
        if n_train == 0 or n_train == len(order):
            raise ConfigurationError(
                f"grouped split with {len(order)} sources and ratio {ratio} "
                "leaves one side empty")
        train_sources = set(order[:n_train])
        train = [p for p in pairs if p.source_id in train_sources]
        test = [p for p in pairs if p.source_id not in train_sources]
        return DatasetSplit(train, test, seed)
    order = rng.permutation(len(pairs))
    n_train = int(ratio * len(pairs))
    train = [pairs[i] for i in order[:n_train]]
    test = [pairs[i] for i in order[n_train:]]
    if not train or not test:
        raise ConfigurationError(
            f"split of {len(pairs)} pairs at ratio {ratio} leaves one side empty")
    return DatasetSplit(train, test, seed)


def carve_validation(pairs, fraction=0.15, seed=0):
    """Split a training list into (train, val) with a seeded shuffle."""
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ConfigurationError(
            f"need at least 2 pairs to carve validation, got {len(pairs)}")
    if not 0 < fraction < 1:
        raise ConfigurationError(f"val fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    n_val = max(1, int(fraction * len(pairs)))
    val = [pairs[i] for i in order[:n_val]]
    train = [pairs[i] for i in order[n_val:]]
    return train, val
