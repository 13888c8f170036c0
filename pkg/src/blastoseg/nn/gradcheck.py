"""Central finite-difference verification of layer backward passes.

The check projects the layer output onto a fixed random direction R, so the
scalar loss L = sum(y * R) has dL/dy = R. Analytic gradients come from one
backward pass with R as the upstream gradient; numeric gradients perturb one
element at a time with a central difference. Run layers in float64 to get
meaningful tolerances; truncation error vanishes for linear maps, so those
pass well below 1e-5.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import PreconditionError, ValidationError
from .layers import BatchNorm2d, Layer


@dataclass
class GradCheckReport:
    name: str
    max_relative_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_relative_error <= self.tolerance


def _flatten_structure(x):
    if isinstance(x, (list, tuple)):
        return list(x)
    return [x]


def _iter_batchnorms(layer):
    stack = [layer]
    while stack:
        node = stack.pop()
        if isinstance(node, BatchNorm2d):
            yield node
        stack.extend(child for _, child in node.sublayers())


def _numeric_grad(arr, loss_fn, step):
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        lp = loss_fn()
        flat[i] = orig - step
        lm = loss_fn()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * step)
    return grad


def _relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    f = numeric
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)
    return float(np.max(np.abs(a - f) / denom)) if a.size else 0.0


def finite_difference_check(layer, x, *, step=1e-3, tolerance=1e-3, train=False, seed=0):
    """Check every input and parameter gradient of ``layer`` at point ``x``.

    ``x`` may be a single array or the list/tuple structure the layer's
    forward expects. Returns one GradCheckReport per checked tensor. Layers
    that draw fresh randomness in the requested mode are rejected, and any
    batchnorm running-statistic updates are frozen for the duration.
    """
    if not isinstance(layer, Layer):
        raise ValidationError("finite_difference_check expects a Layer")
    if step <= 0 or tolerance <= 0:
        raise ValidationError("step and tolerance must be positive")
    if not layer.is_deterministic(train):
        raise PreconditionError(
            "finite-difference check requires a deterministic forward pass; "
            "run dropout-bearing layers in inference mode"
        )

    frozen = []
    for bn in _iter_batchnorms(layer):
        frozen.append((bn, bn.update_running))
        bn.update_running = False
    try:
        y0 = layer.forward(x, train=train)
        proj = np.random.default_rng(seed).standard_normal(y0.shape)
        analytic_inputs = _flatten_structure(layer.backward(proj.astype(y0.dtype)))
        analytic_params = {name: np.array(g, dtype=np.float64)
                           for name, g in layer.named_grads()}

        def loss():
            y = layer.forward(x, train=train)
            return float(np.sum(y.astype(np.float64) * proj))

        inputs = _flatten_structure(x)
        if len(inputs) != len(analytic_inputs):
            raise ValidationError(
                "backward returned a different structure than the forward input")

        reports = []
        multi = len(inputs) > 1
        for i, (arr, ga) in enumerate(zip(inputs, analytic_inputs)):
            numeric = _numeric_grad(arr, loss, step)
            name = f"input[{i}]" if multi else "input"
            reports.append(GradCheckReport(name, _relative_error(ga, numeric), tolerance))
        for name, arr in layer.named_params():
            numeric = _numeric_grad(arr, loss, step)
            reports.append(
                GradCheckReport(name, _relative_error(analytic_params[name], numeric),
                                tolerance))
        return reports
    finally:
        for bn, old in frozen:
            bn.update_running = old
