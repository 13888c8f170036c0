"""Preprocessing: per-image z-score normalization, resizing, and batch
assembly. Images are resized first and normalized second, so the network
always sees zero-mean unit-variance inputs at its working resolution."""

import numpy as np
from PIL import Image

from ..errors import ValidationError

SIGMA_FLOOR = 1e-6


def normalize(image):
    """Per-image z-score: (x - mean) / max(std, 1e-6), population std.

    Returns float32 with the input's shape; constant images map to zeros.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("cannot normalize an empty image")
    std = arr.std()
    return ((arr - arr.mean()) / max(std, SIGMA_FLOOR)).astype(np.float32)


def resize(raster, target, kind="image"):
    """Resize a 2d raster to target x target pixels.

    Images interpolate bilinearly; masks use nearest neighbor so strictly
    two-valued rasters stay two-valued.
    """
    if target < 1:
        raise ValidationError(f"resize target must be >= 1, got {target}")
    if kind not in ("image", "mask"):
        raise ValidationError(f"resize kind must be image or mask, got {kind!r}")
    arr = np.asarray(raster)
    if arr.shape == (target, target):
        return arr.copy()
    resample = Image.BILINEAR if kind == "image" else Image.NEAREST
    return np.asarray(Image.fromarray(arr).resize((target, target), resample))


def prepare_pairs(pairs, working_size):
    """Resize every SamplePair to the working resolution (no-op when sizes
    already match)."""
    out = []
    for pair in pairs:
        if pair.image.shape == (working_size, working_size):
            out.append(pair)
            continue
        out.append(type(pair)(
            image=resize(pair.image, working_size, "image"),
            mask=resize(pair.mask, working_size, "mask"),
            source_id=pair.source_id,
            frame_index=pair.frame_index,
        ))
    return out


def batch_from_pairs(pairs):
    """Stack SamplePairs into network tensors.

    Returns (x, t): x is (n, 1, h, w) float32 normalized images, t is
    (n, 1, h, w) float32 masks with values exactly 0 and 1.
    """
    xs = [normalize(p.image)[None, :, :] for p in pairs]
    ts = [(p.mask > 0).astype(np.float32)[None, :, :] for p in pairs]
    return np.stack(xs), np.stack(ts)
