"""Paired geometric augmentation.

One transform is sampled per call and applied identically to image and mask:
optional horizontal/vertical flips, then an affine map that rotates by an
angle in [0, 270] degrees about the image center, zooms by a factor in
[0.9, 1.1], and shifts by up to 10% of each dimension. Out-of-frame pixels
fill with zero. Images resample bilinearly, masks with nearest neighbor so
they stay strictly two-valued.
"""

from dataclasses import dataclass

import numpy as np

from .dataset import SamplePair


@dataclass
class AugmentParams:
    flip_h: bool
    flip_v: bool
    angle_deg: float
    shift_x: float
    shift_y: float
    zoom: float


def sample_augment_params(rng, shape):
    h, w = shape
    return AugmentParams(
        flip_h=bool(rng.random() < 0.5),
        flip_v=bool(rng.random() < 0.5),
        angle_deg=float(rng.uniform(0.0, 270.0)),
        shift_x=float(rng.uniform(-0.1, 0.1) * w),
        shift_y=float(rng.uniform(-0.1, 0.1) * h),
        zoom=float(rng.uniform(0.9, 1.1)),
    )


def _source_coords(params, shape):
    """Source (y, x) float coordinates for every output pixel under the
    inverse of rotate-then-zoom-then-shift about the center."""
    h, w = shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    ys, xs = np.indices((h, w), dtype=np.float64)
    u = xs - cx - params.shift_x
    v = ys - cy - params.shift_y
    theta = np.deg2rad(params.angle_deg)
    cos_t = np.cos(theta)
    sin_t = np.sin(theta)
    x_src = cx + (cos_t * u + sin_t * v) / params.zoom
    y_src = cy + (-sin_t * u + cos_t * v) / params.zoom
    return y_src, x_src


def _bilinear(arr, y_src, x_src):
    h, w = arr.shape
    y0 = np.floor(y_src).astype(np.int64)
    x0 = np.floor(x_src).astype(np.int64)
    wy = y_src - y0
    wx = x_src - x0
    out = np.zeros(arr.shape, dtype=np.float64)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy = y0 + dy
        xx = x0 + dx
        weight = (wy if dy else 1.0 - wy) * (wx if dx else 1.0 - wx)
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = np.where(inside, arr[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], 0.0)
        out += weight * vals
    return out


def _nearest(arr, y_src, x_src):
    h, w = arr.shape
    yy = np.rint(y_src).astype(np.int64)
    xx = np.rint(x_src).astype(np.int64)
    inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    vals = arr[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
    return np.where(inside, vals, np.zeros((), dtype=arr.dtype))


def apply_augment(image, mask, params):
    """Apply one sampled transform to an aligned (image, mask) pair."""
    img = np.asarray(image)
    msk = np.asarray(mask)
    if params.flip_h:
        img = img[:, ::-1]
        msk = msk[:, ::-1]
    if params.flip_v:
        img = img[::-1, :]
        msk = msk[::-1, :]
    y_src, x_src = _source_coords(params, img.shape)
    out_img = _bilinear(img.astype(np.float64), y_src, x_src)
    out_img = np.clip(np.rint(out_img), 0, 255).astype(np.uint8)
    out_msk = _nearest(np.ascontiguousarray(msk), y_src, x_src)
    return out_img, out_msk


def augment(pair, seed):
    """Seeded augmentation of a SamplePair; deterministic per (pair, seed)."""
    rng = np.random.default_rng(seed)
    params = sample_augment_params(rng, pair.image.shape)
    image, mask = apply_augment(pair.image, pair.mask, params)
    return SamplePair(image, mask, pair.source_id, pair.frame_index)
