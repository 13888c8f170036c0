"""The four segmentation networks and their ensembles.

All variants share the encoder/decoder skeleton: four encoder stages with
2x2 max pooling, a bridge, four decoder stages with learned 2x upsampling
and skip concatenation, and a 1x1 conv + sigmoid head. With base_filters 16
the encoder widths are 16/32/64/128, the bridge 256, and the decoder widths
128/64/32/16.

Variants differ in two orthogonal choices:
  - conv unit: plain double conv block vs. pre-activation residual unit
  - bridge: one conv unit vs. a five-layer dilated cascade (rates 1,2,4,8,16)

which yields unet (plain/plain), sd_unet (plain/dilated), resunet
(residual/plain) and rd_unet (residual/dilated).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .nn.layers import (
    BatchNorm2d,
    ConcatChannels,
    Conv2d,
    Dropout,
    Layer,
    MaxPool2d,
    ReLU,
    ResidualAdd,
    Sequential,
    Sigmoid,
    TransposedConv2d,
)

MODEL_NAMES = ("unet", "sd_unet", "resunet", "rd_unet")
ENSEMBLE_SCHEMES = ("unweighted", "weighted")
BRIDGE_DILATIONS = (1, 2, 4, 8, 16)
DEPTH = 4


def conv_block(c_in, c_out, *, dilation=1, dropout_rate, rng, dtype, init_running):
    """conv -> batchnorm -> relu -> dropout, the plain variant's building block."""
    return Sequential([
        ("conv", Conv2d(c_in, c_out, 3, dilation=dilation, rng=rng, dtype=dtype)),
        ("bn", BatchNorm2d(c_out, dtype=dtype, init_running=init_running)),
        ("relu", ReLU()),
        ("drop", Dropout(dropout_rate)),
    ])


def double_conv(c_in, c_out, **kw):
    return Sequential([
        ("block1", conv_block(c_in, c_out, **kw)),
        ("block2", conv_block(c_out, c_out, **kw)),
    ])


def dilated_cascade(c_in, c_out, **kw):
    """Five stacked 3x3 conv blocks with dilation rates 1, 2, 4, 8, 16.

    Receptive field 1 + 2*(1+2+4+8+16) = 63 pixels square.
    """
    layers = []
    prev = c_in
    for i, rate in enumerate(BRIDGE_DILATIONS, start=1):
        layers.append((f"layer{i}", conv_block(prev, c_out, dilation=rate, **kw)))
        prev = c_out
    return Sequential(layers)


class ResidualUnit(Layer):
    """Pre-activation residual unit.

    Body is two chains of batchnorm -> relu -> dropout -> conv; the skip path
    is the identity, or a 1x1 projection conv when the channel count changes.
    With all conv parameters zeroed the unit reduces to its (projected) input.
    """

    def __init__(self, c_in, c_out, *, dropout_rate, rng, dtype, init_running):
        self.body = Sequential([
            ("bn1", BatchNorm2d(c_in, dtype=dtype, init_running=init_running)),
            ("relu1", ReLU()),
            ("drop1", Dropout(dropout_rate)),
            ("conv1", Conv2d(c_in, c_out, 3, rng=rng, dtype=dtype)),
            ("bn2", BatchNorm2d(c_out, dtype=dtype, init_running=init_running)),
            ("relu2", ReLU()),
            ("drop2", Dropout(dropout_rate)),
            ("conv2", Conv2d(c_out, c_out, 3, rng=rng, dtype=dtype)),
        ])
        self.proj = Conv2d(c_in, c_out, 1, rng=rng, dtype=dtype) if c_in != c_out else None
        self.add = ResidualAdd()

    def sublayers(self):
        children = [("body", self.body)]
        if self.proj is not None:
            children.append(("proj", self.proj))
        return tuple(children)

    def forward(self, x, train=False, rng=None):
        f = self.body.forward(x, train=train, rng=rng)
        s = x if self.proj is None else self.proj.forward(x, train=train, rng=rng)
        return self.add.forward((f, s), train=train, rng=rng)

    def backward(self, gy):
        gf, gs = self.add.backward(gy)
        gx = self.body.backward(gf)
        if self.proj is not None:
            gs = self.proj.backward(gs)
        return gx + gs


def upsample_block(c_in, c_out, *, plain, dropout_rate, rng, dtype, init_running):
    """Learned 2x upsampling. The plain variants follow it with the usual
    batchnorm/relu/dropout trio; the residual variants leave it bare because
    the next residual unit opens with its own normalization and activation."""
    tconv = TransposedConv2d(c_in, c_out, rng=rng, dtype=dtype)
    if not plain:
        return Sequential([("tconv", tconv)])
    return Sequential([
        ("tconv", tconv),
        ("bn", BatchNorm2d(c_out, dtype=dtype, init_running=init_running)),
        ("relu", ReLU()),
        ("drop", Dropout(dropout_rate)),
    ])


class ModelGraph(Layer):
    """A fully wired segmentation network.

    forward keeps enough per-layer state for one backward pass; backward
    routes gradients through the skip connections and fills every layer's
    parameter gradients.
    """

    def __init__(self, name, base_filters=16, input_shape=240, *, seed=0,
                 dropout_rate=0.05, dtype=np.float32):
        if name not in MODEL_NAMES:
            raise ConfigurationError(
                f"unknown model {name!r}; expected one of {', '.join(MODEL_NAMES)}")
        if isinstance(input_shape, int):
            input_shape = (input_shape, input_shape)
        h, w = input_shape
        divisor = 2 ** DEPTH
        if h % divisor or w % divisor:
            raise ConfigurationError(
                f"input shape {h}x{w} must be divisible by {divisor} "
                f"to survive {DEPTH} pooling stages")
        if base_filters < 1:
            raise ConfigurationError(f"base_filters must be >= 1, got {base_filters}")

        self.name = name
        self.base_filters = base_filters
        self.input_shape = (h, w)
        self.seed = seed
        self.dropout_rate = dropout_rate
        self.dtype = np.dtype(dtype)

        residual = name in ("resunet", "rd_unet")
        dilated = name in ("sd_unet", "rd_unet")
        rng = np.random.default_rng(seed)
        kw = dict(dropout_rate=dropout_rate, rng=rng, dtype=dtype, init_running=True)
        unit = ResidualUnit if residual else double_conv

        widths = [base_filters * 2 ** i for i in range(DEPTH)]
        bridge_width = base_filters * 2 ** DEPTH

        self.encoders = []
        self.pools = []
        prev = 1
        for width in widths:
            self.encoders.append(unit(prev, width, **kw))
            self.pools.append(MaxPool2d())
            prev = width

        bridge_builder = dilated_cascade if dilated else unit
        self.bridge = bridge_builder(prev, bridge_width, **kw)

        self.ups = []
        self.concats = []
        self.decoders = []
        prev = bridge_width
        for width in reversed(widths):
            self.ups.append(upsample_block(prev, width, plain=not residual, **kw))
            self.concats.append(ConcatChannels())
            self.decoders.append(unit(2 * width, width, **kw))
            prev = width

        self.head = Conv2d(prev, 1, kernel=1, rng=rng, dtype=dtype)
        self.sigmoid = Sigmoid()

    def sublayers(self):
        children = []
        for i, (enc, pool) in enumerate(zip(self.encoders, self.pools), start=1):
            children.append((f"enc{i}", enc))
            children.append((f"pool{i}", pool))
        children.append(("bridge", self.bridge))
        for i, (up, cat, dec) in enumerate(
                zip(self.ups, self.concats, self.decoders), start=1):
            children.append((f"up{i}", up))
            children.append((f"concat{i}", cat))
            children.append((f"dec{i}", dec))
        children.append(("head", self.head))
        children.append(("out", self.sigmoid))
        return tuple(children)

    def forward(self, x, train=False, rng=None):
        skips = []
        h = x
        for enc, pool in zip(self.encoders, self.pools):
            s = enc.forward(h, train=train, rng=rng)
            skips.append(s)
            h = pool.forward(s, train=train, rng=rng)
        h = self.bridge.forward(h, train=train, rng=rng)
        for up, cat, dec in zip(self.ups, self.concats, self.decoders):
            u = up.forward(h, train=train, rng=rng)
            h = cat.forward([skips.pop(), u], train=train, rng=rng)
            h = dec.forward(h, train=train, rng=rng)
        z = self.head.forward(h, train=train, rng=rng)
        return self.sigmoid.forward(z, train=train, rng=rng)

    def backward(self, gy):
        g = self.sigmoid.backward(gy)
        g = self.head.backward(g)
        skip_grads = []
        for up, cat, dec in zip(reversed(self.ups), reversed(self.concats),
                                reversed(self.decoders)):
            g = dec.backward(g)
            gs, gu = cat.backward(g)
            skip_grads.append(gs)
            g = up.backward(gu)
        g = self.bridge.backward(g)
        # skip_grads was filled while walking decoders deepest-last, so its
        # tail pairs with the deepest encoder.
        for enc, pool in zip(reversed(self.encoders), reversed(self.pools)):
            g = pool.backward(g)
            g = enc.backward(g + skip_grads.pop())
        return g

    def layer_specs(self, prefix=""):
        """Ordered (name, LayerSpec) pairs for every leaf layer."""
        return list(_walk_specs(self, prefix))

    def describe(self):
        """Self-contained architecture description embedded in checkpoints."""
        return {
            "model": self.name,
            "base_filters": self.base_filters,
            "input_shape": list(self.input_shape),
            "dropout_rate": self.dropout_rate,
            "seed": self.seed,
            "layers": [
                {"name": n, **s.to_dict()} for n, s in self.layer_specs()
            ],
        }

    def param_count(self):
        return int(sum(a.size for _, a in self.named_params()))

    def state_arrays(self):
        """Ordered name -> array map of every parameter and buffer."""
        state = {}
        for name, arr in self.named_params():
            state[name] = arr
        for name, arr in self.named_buffers():
            state[name] = arr
        return state


def _walk_specs(layer, prefix):
    children = tuple(layer.sublayers())
    if not children:
        spec = getattr(layer, "spec", None)
        if spec is not None:
            yield prefix.rstrip("."), spec()
        return
    for name, child in children:
        yield from _walk_specs(child, prefix + name + ".")


def build_unet(base_filters=16, input_shape=240, **kw):
    return ModelGraph("unet", base_filters, input_shape, **kw)


def build_sd_unet(base_filters=16, input_shape=240, **kw):
    return ModelGraph("sd_unet", base_filters, input_shape, **kw)


def build_resunet(base_filters=16, input_shape=240, **kw):
    return ModelGraph("resunet", base_filters, input_shape, **kw)


def build_rd_unet(base_filters=16, input_shape=240, **kw):
    return ModelGraph("rd_unet", base_filters, input_shape, **kw)


def build_model(name, base_filters=16, input_shape=240, **kw):
    return ModelGraph(name, base_filters, input_shape, **kw)


def predict(model, batch):
    """Inference-mode probability map: dropout off, batchnorm running stats."""
    return model.forward(batch, train=False)


@dataclass
class EnsembleSpec:
    """Member models plus normalized averaging weights."""

    members: list
    weights: list
    scheme: str

    def __post_init__(self):
        if not self.members:
            raise ConfigurationError("ensemble needs at least one member model")
        if len(self.weights) != len(self.members):
            raise ConfigurationError(
                f"{len(self.members)} members but {len(self.weights)} weights")
        if any(w < 0 for w in self.weights):
            raise ConfigurationError("ensemble weights must be non-negative")
        total = float(sum(self.weights))
        if total <= 0:
            raise ConfigurationError("ensemble weights must not all be zero")
        self.weights = [float(w) / total for w in self.weights]
        if self.scheme not in ENSEMBLE_SCHEMES:
            raise ConfigurationError(f"unknown ensemble scheme {self.scheme!r}")


def unweighted_ensemble(members):
    members = list(members)
    return EnsembleSpec(members, [1.0] * len(members), "unweighted")


def weighted_ensemble(members, scores):
    """Weights proportional to each member's validation Jaccard index."""
    members = list(members)
    scores = [float(s) for s in scores]
    if len(scores) != len(members):
        raise ConfigurationError(
            f"{len(members)} members but {len(scores)} scores")
    return EnsembleSpec(members, scores, "weighted")


def ensemble_predict(spec, batch):
    """Pixelwise weighted average of member probability maps.

    The unweighted scheme averages the stacked maps directly so that n equal
    members reproduce a single member bit-exactly; the weighted scheme
    accumulates w_i * p_i in float64, which keeps one-hot weight vectors
    exact as well.
    """
    preds = [predict(m, batch).astype(np.float64) for m in spec.members]
    if spec.scheme == "unweighted":
        out = np.mean(preds, axis=0)
    else:
        out = np.zeros_like(preds[0])
        for w, p in zip(spec.weights, preds):
            out += w * p
    return out.astype(np.float32)
