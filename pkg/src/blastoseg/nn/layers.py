"""Stateful layers built on the functional kernels.

Every layer implements the same small protocol:

    forward(x, train=False, rng=None) -> y
    backward(gy) -> gx            # fills parameter gradients as a side effect
    param_items() / grad_items() / buffer_items() -> iterable of (name, array)
    sublayers() -> iterable of (name, child layer)

``x`` is a single rank-4 array for most layers; ConcatChannels takes a list
and ResidualAdd a pair, and their backward passes return matching structures.
Composite blocks (in the models module) subclass Layer and only implement
forward/backward/sublayers, inheriting the recursive name walks.
"""

from dataclasses import dataclass, asdict

import numpy as np

from ..errors import (
    DimensionError,
    PreconditionError,
    StateError,
    ValidationError,
)
from . import ops

LAYER_KINDS = (
    "conv2d",
    "transposed_conv2d",
    "maxpool2d",
    "batchnorm",
    "relu",
    "sigmoid",
    "dropout",
    "concat",
    "residual_add",
)


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer, used for checkpoint metadata
    and architecture audits."""

    kind: str
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    dilation: int = 1
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ValidationError(f"stride must be >= 1, got {self.stride}")
        if self.dilation < 1:
            raise ValidationError(f"dilation must be >= 1, got {self.dilation}")
        if self.dilation > 1 and self.kind != "conv2d":
            raise ValidationError(
                f"dilation above 1 is only valid for conv2d, not {self.kind}"
            )
        if not 0.0 <= self.rate < 1.0:
            raise ValidationError(f"dropout rate must be in [0, 1), got {self.rate}")

    def to_dict(self):
        return asdict(self)


class Layer:
    """Base class; see the module docstring for the protocol."""

    def sublayers(self):
        return ()

    def param_items(self):
        return ()

    def grad_items(self):
        return ()

    def buffer_items(self):
        return ()

    def _walk(self, method_name, prefix):
        yield from ((prefix + n, a) for n, a in getattr(self, method_name)())
        for child_name, child in self.sublayers():
            yield from child._walk(method_name, prefix + child_name + ".")

    def named_params(self, prefix=""):
        yield from self._walk("param_items", prefix)

    def named_grads(self, prefix=""):
        yield from self._walk("grad_items", prefix)

    def named_buffers(self, prefix=""):
        yield from self._walk("buffer_items", prefix)

    def is_deterministic(self, train):
        """Whether forward(x, train) is a fixed function of x and the
        parameters (no fresh randomness)."""
        return all(child.is_deterministic(train) for _, child in self.sublayers())

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError


def he_uniform(rng, shape, fan_in, dtype):
    limit = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2d(Layer):
    """Same-padded convolution with bias, He-uniform initialised."""

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, dilation=1,
                 *, rng, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.dilation = dilation
        fan_in = in_channels * kernel * kernel
        self.w = he_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype)
        self.b = np.zeros(out_channels, dtype=dtype)
        self.gw = None
        self.gb = None
        self._cache = None

    def spec(self):
        return LayerSpec("conv2d", out_channels=self.out_channels, kernel=self.kernel,
                         stride=self.stride, dilation=self.dilation)

    def param_items(self):
        return (("w", self.w), ("b", self.b))

    def grad_items(self):
        return (("w", self.gw), ("b", self.gb))

    def forward(self, x, train=False, rng=None):
        y, self._cache = ops.conv2d(x, self.w, self.b, self.stride, self.dilation)
        return y

    def backward(self, gy):
        gx, self.gw, self.gb = ops.conv2d_backward(self._cache, gy)
        return gx


class TransposedConv2d(Layer):
    """Stride-2 learned upsampling with a 2x2 kernel, no bias."""

    def __init__(self, in_channels, out_channels, *, rng, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.w = he_uniform(rng, (in_channels, out_channels, 2, 2), in_channels * 4, dtype)
        self.gw = None
        self._cache = None

    def spec(self):
        return LayerSpec("transposed_conv2d", out_channels=self.out_channels,
                         kernel=2, stride=2)

    def param_items(self):
        return (("w", self.w),)

    def grad_items(self):
        return (("w", self.gw),)

    def forward(self, x, train=False, rng=None):
        y, self._cache = ops.transposed_conv2d(x, self.w)
        return y

    def backward(self, gy):
        gx, self.gw = ops.transposed_conv2d_backward(self._cache, gy)
        return gx


class MaxPool2d(Layer):
    def __init__(self):
        self._cache = None

    def spec(self):
        return LayerSpec("maxpool2d", kernel=2, stride=2)

    def forward(self, x, train=False, rng=None):
        y, self._cache = ops.maxpool2d(x)
        return y

    def backward(self, gy):
        return ops.maxpool2d_backward(self._cache, gy)


class BatchNorm2d(Layer):
    """Per-channel batch normalisation with running statistics.

    Train mode normalises with the batch mean and biased variance (statistics
    accumulated in float64) and updates the running buffers as
    ``running = momentum * running + (1 - momentum) * batch``. Inference mode
    uses the running buffers and raises a StateError if they were never
    populated. Setting ``update_running = False`` freezes the buffers without
    changing the normalisation math, which keeps train-mode forwards
    repeatable for gradient checks.
    """

    def __init__(self, channels, momentum=0.9, eps=1e-5, *, dtype=np.float32,
                 init_running=False):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.initialized = init_running
        self.update_running = True
        self.ggamma = None
        self.gbeta = None
        self._cache = None

    def spec(self):
        return LayerSpec("batchnorm", out_channels=self.channels)

    def param_items(self):
        return (("gamma", self.gamma), ("beta", self.beta))

    def grad_items(self):
        return (("gamma", self.ggamma), ("beta", self.gbeta))

    def buffer_items(self):
        return (("running_mean", self.running_mean), ("running_var", self.running_var))

    def _check_channels(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(
                f"channel axis mismatch: expected {self.channels} channels, "
                f"got input shape {tuple(x.shape)}"
            )

    def forward(self, x, train=False, rng=None):
        self._check_channels(x)
        if train:
            x64 = x.astype(np.float64)
            mean = x64.mean(axis=(0, 2, 3))
            var = x64.var(axis=(0, 2, 3))
            ivar = 1.0 / np.sqrt(var + self.eps)
            xhat = (x64 - mean[:, None, None]) * ivar[:, None, None]
            y = self.gamma.astype(np.float64)[:, None, None] * xhat \
                + self.beta.astype(np.float64)[:, None, None]
            if self.update_running:
                m = self.momentum
                self.running_mean[:] = (m * self.running_mean + (1 - m) * mean).astype(
                    self.running_mean.dtype)
                self.running_var[:] = (m * self.running_var + (1 - m) * var).astype(
                    self.running_var.dtype)
                self.initialized = True
            self._cache = ("train", xhat, ivar)
            return y.astype(x.dtype)
        if not self.initialized:
            raise StateError(
                "batchnorm inference requested before any running statistics "
                "were accumulated; run a training pass or load a checkpoint first"
            )
        scale = self.gamma / np.sqrt(self.running_var + self.eps)
        shift = self.beta - scale * self.running_mean
        xhat = (x.astype(np.float64) - self.running_mean.astype(np.float64)[:, None, None]) \
            / np.sqrt(self.running_var.astype(np.float64) + self.eps)[:, None, None]
        self._cache = ("infer", xhat, scale)
        return (x * scale[:, None, None] + shift[:, None, None]).astype(x.dtype)

    def backward(self, gy):
        mode, xhat, aux = self._cache
        gy64 = gy.astype(np.float64)
        self.gbeta = gy64.sum(axis=(0, 2, 3)).astype(self.beta.dtype)
        self.ggamma = (gy64 * xhat).sum(axis=(0, 2, 3)).astype(self.gamma.dtype)
        if mode == "infer":
            return (gy * aux[:, None, None]).astype(gy.dtype)
        ivar = aux
        n_elem = gy.shape[0] * gy.shape[2] * gy.shape[3]
        sum_gy = gy64.sum(axis=(0, 2, 3), keepdims=True)
        sum_gy_xhat = (gy64 * xhat).sum(axis=(0, 2, 3), keepdims=True)
        coeff = (self.gamma.astype(np.float64) * ivar)[:, None, None] / n_elem
        gx = coeff * (n_elem * gy64 - sum_gy - xhat * sum_gy_xhat)
        return gx.astype(gy.dtype)


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def spec(self):
        return LayerSpec("relu")

    def forward(self, x, train=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, np.zeros((), dtype=x.dtype))

    def backward(self, gy):
        return np.where(self._mask, gy, np.zeros((), dtype=gy.dtype))


class Sigmoid(Layer):
    def __init__(self):
        self._y = None

    def spec(self):
        return LayerSpec("sigmoid")

    def forward(self, x, train=False, rng=None):
        # Split by sign so exp never overflows.
        pos = x >= 0
        z = np.where(pos, -x, x)
        ez = np.exp(z)
        y = np.where(pos, 1.0 / (1.0 + ez), ez / (1.0 + ez)).astype(x.dtype)
        self._y = y
        return y

    def backward(self, gy):
        y = self._y
        return (gy * y * (1.0 - y)).astype(gy.dtype)


class Dropout(Layer):
    """Inverted dropout: in train mode keeps each activation with probability
    1 - rate and rescales by 1 / (1 - rate); at inference it is the identity."""

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._scaled_mask = None

    def spec(self):
        return LayerSpec("dropout", rate=self.rate)

    def is_deterministic(self, train):
        return not train or self.rate == 0.0

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._scaled_mask = None
            return x
        if rng is None:
            raise PreconditionError("dropout in train mode requires a random generator")
        keep = rng.random(x.shape) >= self.rate
        self._scaled_mask = (keep / (1.0 - self.rate)).astype(x.dtype)
        return x * self._scaled_mask

    def backward(self, gy):
        if self._scaled_mask is None:
            return gy
        return gy * self._scaled_mask


class ConcatChannels(Layer):
    """Concatenates a list of rank-4 arrays along the channel axis."""

    def __init__(self):
        self._splits = None

    def spec(self):
        return LayerSpec("concat")

    def forward(self, xs, train=False, rng=None):
        if not isinstance(xs, (list, tuple)) or len(xs) < 2:
            raise ValidationError("concat expects a list of at least two arrays")
        first = xs[0]
        for i, x in enumerate(xs):
            if x.ndim != 4:
                raise DimensionError(f"concat input {i} must be rank 4, got rank {x.ndim}")
            if x.shape[0] != first.shape[0]:
                raise DimensionError(
                    f"batch axis mismatch in concat: {x.shape[0]} vs {first.shape[0]}")
            if x.shape[2:] != first.shape[2:]:
                raise DimensionError(
                    f"spatial axes mismatch in concat: {x.shape[2:]} vs {first.shape[2:]}")
        self._splits = np.cumsum([x.shape[1] for x in xs])[:-1]
        return np.concatenate(xs, axis=1)

    def backward(self, gy):
        return np.split(gy, self._splits, axis=1)


class ResidualAdd(Layer):
    """Adds a transformed branch to its skip connection."""

    def spec(self):
        return LayerSpec("residual_add")

    def forward(self, xs, train=False, rng=None):
        a, b = xs
        if a.shape != b.shape:
            raise DimensionError(
                f"residual add needs matching shapes, got {a.shape} and {b.shape}")
        return a + b

    def backward(self, gy):
        return gy, gy


class Sequential(Layer):
    """Runs named child layers in order; backward walks them in reverse."""

    def __init__(self, children):
        self._children = list(children)

    def sublayers(self):
        return tuple(self._children)

    def forward(self, x, train=False, rng=None):
        for _, child in self._children:
            x = child.forward(x, train=train, rng=rng)
        return x

    def backward(self, gy):
        for _, child in reversed(self._children):
            gy = child.backward(gy)
        return gy
