"""Functional kernels for rank-4 tensors laid out (batch, channel, height, width).

Forward kernels return (output, cache); the matching *_backward function
consumes that cache plus the upstream gradient. Outputs keep the input
dtype; the sums inside convolutions run in float64 regardless.

"Same" padding follows the asymmetric convention: for a total pad of
``max((out - 1) * stride + (kernel - 1) * dilation + 1 - size, 0)`` the
smaller half goes before, the larger half after.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import DimensionError, UnsupportedConfigError


def conv_output_size(size, stride=1):
    """Spatial output size of a same-padded convolution: ceil(size / stride)."""
    return -(-size // stride)


def same_padding(size, kernel, stride=1, dilation=1):
    """(before, after) zero padding so the output size is ceil(size / stride)."""
    out = conv_output_size(size, stride)
    total = max((out - 1) * stride + (kernel - 1) * dilation + 1 - size, 0)
    before = total // 2
    return before, total - before


def _check_rank4(x, name):
    if x.ndim != 4:
        raise DimensionError(
            f"{name} must be rank 4 (batch, channel, height, width), got rank {x.ndim}"
        )


def _im2col(xp, kh, kw, stride, dilation, oh, ow):
    """Gather dilated patches of the padded input into a (n, c*kh*kw, oh*ow)
    float64 matrix ready for a GEMM."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    patches = as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
    )
    return patches.astype(np.float64).reshape(n, c * kh * kw, oh * ow)


def _col2im(cols, x_shape, kh, kw, stride, dilation, pads, oh, ow):
    """Scatter-add columns back onto the padded input grid and strip padding."""
    n, c, h, w = x_shape
    pt, pb, pl, pr = pads
    gxp = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=np.float64)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    for a in range(kh):
        ia = a * dilation
        for b in range(kw):
            jb = b * dilation
            gxp[:, :, ia : ia + oh * stride : stride, jb : jb + ow * stride : stride] += cols[
                :, :, a, b
            ]
    return gxp[:, :, pt : pt + h, pl : pl + w]


def conv2d(x, w, b=None, stride=1, dilation=1):
    """Same-padded 2d convolution.

    x: (n, c_in, h, w); w: (c_out, c_in, kh, kw); b: (c_out,) or None.
    Returns (y, cache) with y of shape (n, c_out, ceil(h/stride), ceil(w/stride)).
    """
    _check_rank4(x, "input")
    _check_rank4(w, "kernel")
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise DimensionError(
            f"channel axis mismatch: input has {c} channels, kernel expects {ci}"
        )
    if b is not None and b.shape != (co,):
        raise DimensionError(
            f"bias axis mismatch: kernel has {co} output channels, bias has shape {b.shape}"
        )
    if stride < 1 or dilation < 1:
        raise UnsupportedConfigError("stride and dilation must be >= 1")

    pt, pb = same_padding(h, kh, stride, dilation)
    pl, pr = same_padding(wd, kw, stride, dilation)
    oh = conv_output_size(h, stride)
    ow = conv_output_size(wd, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
    y = np.matmul(w.reshape(co, -1).astype(np.float64), cols)
    if b is not None:
        y += b.astype(np.float64)[:, None]
    y = y.reshape(n, co, oh, ow).astype(x.dtype)
    cache = (x.shape, x.dtype, xp, w, b is not None, stride, dilation, (pt, pb, pl, pr), (oh, ow))
    return y, cache


def conv2d_backward(cache, gy):
    """Gradients of conv2d. Returns (gx, gw, gb); gb is None for bias-free calls."""
    x_shape, x_dtype, xp, w, has_bias, stride, dilation, pads, (oh, ow) = cache
    n = x_shape[0]
    co, _, kh, kw = w.shape
    if gy.shape != (n, co, oh, ow):
        raise DimensionError(
            f"gradient shape {gy.shape} does not match conv output {(n, co, oh, ow)}"
        )
    gy64 = gy.reshape(n, co, oh * ow).astype(np.float64)
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
    gw = np.matmul(gy64, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    gb = gy64.sum(axis=(0, 2)) if has_bias else None
    gcols = np.matmul(w.reshape(co, -1).astype(np.float64).T, gy64)
    gx = _col2im(gcols, x_shape, kh, kw, stride, dilation, pads, oh, ow)
    return (
        gx.astype(x_dtype),
        gw.astype(w.dtype),
        gb.astype(w.dtype) if has_bias else None,
    )


def transposed_conv2d(x, w):
    """2x stride-2 transposed convolution (learned upsampling), no bias.

    x: (n, c_in, h, w); w: (c_in, c_out, 2, 2). Each input pixel stamps the
    2x2 kernel onto the doubled output grid, so y has shape (n, c_out, 2h, 2w).
    Only the exact-doubling configuration is supported.
    """
    _check_rank4(x, "input")
    _check_rank4(w, "kernel")
    n, c, h, wd = x.shape
    ci, co, kh, kw = w.shape
    if (kh, kw) != (2, 2):
        raise UnsupportedConfigError(
            f"transposed conv supports only a 2x2 kernel at stride 2, got {kh}x{kw}"
        )
    if ci != c:
        raise DimensionError(
            f"channel axis mismatch: input has {c} channels, kernel expects {ci}"
        )
    t = np.tensordot(x.astype(np.float64), w.astype(np.float64), axes=([1], [0]))
    # t: (n, h, w, c_out, 2, 2) -> (n, c_out, h, 2, w, 2) -> (n, c_out, 2h, 2w)
    y = t.transpose(0, 3, 1, 4, 2, 5).reshape(n, co, 2 * h, 2 * wd)
    cache = (x, w)
    return y.astype(x.dtype), cache


def transposed_conv2d_backward(cache, gy):
    """Gradients of transposed_conv2d. Returns (gx, gw)."""
    x, w = cache
    n, c, h, wd = x.shape
    ci, co, _, _ = w.shape
    if gy.shape != (n, co, 2 * h, 2 * wd):
        raise DimensionError(
            f"gradient shape {gy.shape} does not match output {(n, co, 2 * h, 2 * wd)}"
        )
    gy6 = gy.reshape(n, co, h, 2, wd, 2).astype(np.float64)
    gx = np.tensordot(gy6, w.astype(np.float64), axes=([1, 3, 5], [1, 2, 3]))
    gx = gx.transpose(0, 3, 1, 2)
    gw = np.tensordot(x.astype(np.float64), gy6, axes=([0, 2, 3], [0, 2, 4]))
    return gx.astype(x.dtype), gw.astype(w.dtype)


def maxpool2d(x):
    """2x2 max pooling at stride 2. Ties resolve to the first element of the
    window in row-major order. Spatial sizes must be even."""
    _check_rank4(x, "input")
    n, c, h, w = x.shape
    if h % 2:
        raise DimensionError(f"height axis must be even for 2x2 pooling, got {h}")
    if w % 2:
        raise DimensionError(f"width axis must be even for 2x2 pooling, got {w}")
    windows = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = windows.argmax(axis=-1)
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    cache = (x.shape, idx)
    return y, cache


def maxpool2d_backward(cache, gy):
    """Routes each upstream gradient to the argmax position of its window."""
    (n, c, h, w), idx = cache
    if gy.shape != idx.shape:
        raise DimensionError(
            f"gradient shape {gy.shape} does not match pooled output {idx.shape}"
        )
    g = np.zeros((n, c, h // 2, w // 2, 4), dtype=gy.dtype)
    np.put_along_axis(g, idx[..., None], gy[..., None], axis=-1)
    return g.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
