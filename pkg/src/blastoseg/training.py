"""Training recipe: BCE + soft-Jaccard loss, Adam, plateau LR decay,
early stopping with best-weights restoration, and the epoch loop.
"""

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import (
    ConfigurationError,
    DimensionError,
    TrainingDiverged,
    ValidationError,
)
from .data.pipeline import batch_from_pairs

LOG_CLAMP = 1e-7


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 200
    initial_lr: float = 1e-4
    lr_factor: float = 0.95
    lr_patience: int = 5
    min_lr: float = 1e-6
    early_stop_patience: int = 15
    dropout_rate: float = 0.05
    loss_epsilon: float = 1.0
    improvement_threshold: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigurationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0 < self.lr_factor < 1:
            raise ConfigurationError(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if self.min_lr > self.initial_lr:
            raise ConfigurationError(
                f"min_lr {self.min_lr} exceeds initial_lr {self.initial_lr}")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ConfigurationError("patience values must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigurationError(
                f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def to_text(self):
        lines = [f"{f.name} = {getattr(self, f.name)!r}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        """Parse ``key = value`` lines; blank lines and # comments allowed."""
        # Field annotations may be type objects or strings depending on how
        # the module was imported, so compare by name.
        is_int = {f.name: getattr(f.type, "__name__", f.type) == "int"
                  for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"config line {lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in is_int:
                raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
            try:
                kwargs[key] = int(value) if is_int[key] else float(value)
            except ValueError as exc:
                raise ConfigurationError(
                    f"config line {lineno}: bad value for {key}: {value!r}") from exc
        return cls(**kwargs)

    def replace(self, **overrides):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig(**values)


def bce_jaccard_loss(pred, target, epsilon=1.0):
    """Binary cross entropy plus (1 - soft Jaccard), with its gradient.

    The BCE term clamps probabilities to [1e-7, 1 - 1e-7] inside the logs
    only; the soft Jaccard term uses the raw probabilities, per-sample, with
    smoothing ``epsilon`` on both numerator and denominator, averaged over
    the batch. Returns (scalar loss, dloss/dpred).
    """
    if pred.shape != target.shape:
        raise DimensionError(
            f"prediction shape {pred.shape} does not match target {target.shape}")
    t64 = target.astype(np.float64)
    if not np.all((t64 == 0.0) | (t64 == 1.0)):
        raise ValidationError("targets must contain only 0 and 1")
    p64 = pred.astype(np.float64)

    clamped = np.clip(p64, LOG_CLAMP, 1.0 - LOG_CLAMP)
    n_total = p64.size
    bce = -np.sum(t64 * np.log(clamped) + (1 - t64) * np.log1p(-clamped)) / n_total
    in_range = (p64 > LOG_CLAMP) & (p64 < 1.0 - LOG_CLAMP)
    grad_bce = np.where(
        in_range, (-t64 / clamped + (1 - t64) / (1 - clamped)) / n_total, 0.0)

    n = pred.shape[0]
    axes = tuple(range(1, pred.ndim))
    inter = np.sum(p64 * t64, axis=axes)
    union = np.sum(p64, axis=axes) + np.sum(t64, axis=axes) - inter
    soft_j = (inter + epsilon) / (union + epsilon)
    loss = float(bce + np.mean(1.0 - soft_j))

    shape = (n,) + (1,) * (pred.ndim - 1)
    num = inter.reshape(shape) + epsilon
    den = union.reshape(shape) + epsilon
    dj_dp = (t64 * den - num * (1 - t64)) / den**2
    grad = grad_bce - dj_dp / n
    return loss, grad.astype(pred.dtype)


class Adam:
    """Standard Adam with bias correction; updates parameters in place."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}

    def step(self, grads, lr=None):
        if lr is not None:
            self.lr = lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads[name]
            if g is None:
                raise TrainingDiverged(
                    f"no gradient recorded for parameter {name}", parameter=name)
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(
                    f"non-finite gradient in parameter {name}", parameter=name)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * np.square(g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` consecutive epochs
    without validation-loss improvement; never below ``min_lr``. The patience
    counter resets on every improvement and on every reduction."""

    def __init__(self, initial_lr, factor=0.95, patience=5, min_lr=1e-6,
                 threshold=1e-6):
        self.lr = initial_lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = math.inf
        self.wait = 0

    def update(self, val_loss):
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr


class EarlyStopper:
    """Request a stop after ``patience`` consecutive epochs without
    validation-loss improvement."""

    def __init__(self, patience=15, threshold=1e-6):
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0
        self.epoch = 0

    def update(self, val_loss):
        self.epoch += 1
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.best_epoch = self.epoch
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_jaccard: float
    lr: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = 0

    @property
    def best_val_loss(self):
        return min(r.val_loss for r in self.records)

    @property
    def best_val_jaccard(self):
        return self.records[self.best_epoch - 1].val_jaccard

    def to_csv(self):
        lines = ["epoch,train_loss,val_loss,val_jaccard,lr"]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.val_jaccard!r},{r.lr!r}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_csv())


def _forward_loss(model, pairs, batch_size, epsilon):
    """Inference-mode loss and micro Jaccard (threshold 0.5) over ``pairs``."""
    total_loss = 0.0
    tp = fp = fn = 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start : start + batch_size]
        x, t = batch_from_pairs(chunk)
        p = model.forward(x, train=False)
        loss, _ = bce_jaccard_loss(p, t, epsilon)
        total_loss += loss * len(chunk)
        hard = p >= 0.5
        gt = t >= 0.5
        tp += int(np.sum(hard & gt))
        fp += int(np.sum(hard & ~gt))
        fn += int(np.sum(~hard & gt))
    denom = tp + fp + fn
    jaccard = tp / denom if denom else 1.0
    return total_loss / len(pairs), jaccard


def _snapshot(model):
    return {name: arr.copy() for name, arr in model.state_arrays().items()}


def _restore(model, snapshot):
    for name, arr in model.state_arrays().items():
        arr[...] = snapshot[name]


def train(model, train_pairs, val_pairs, config, *, augment_fn=None, log=None):
    """Run the full recipe and return (model, TrainHistory).

    ``train_pairs``/``val_pairs`` are SamplePair lists at the model's working
    resolution. ``augment_fn(pair, seed) -> pair`` is applied to every
    training sample each epoch with a derived seed. The model is left holding
    the best-validation-loss weights.
    """
    if not train_pairs:
        raise ConfigurationError("training set is empty")
    if not val_pairs:
        raise ConfigurationError("validation set is empty")

    rng = np.random.default_rng(config.seed)
    params = dict(model.named_params())
    optimizer = Adam(params, lr=config.initial_lr)
    scheduler = PlateauScheduler(
        config.initial_lr, config.lr_factor, config.lr_patience,
        config.min_lr, config.improvement_threshold)
    stopper = EarlyStopper(config.early_stop_patience, config.improvement_threshold)
    history = TrainHistory()
    best = _snapshot(model)
    best_epoch = 0
    lr = config.initial_lr

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_pairs))
        epoch_loss = 0.0
        for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
            chunk = [train_pairs[i] for i in order[start : start + config.batch_size]]
            if augment_fn is not None:
                chunk = [augment_fn(pair, int(rng.integers(2**32)))
                         for pair in chunk]
            x, t = batch_from_pairs(chunk)
            p = model.forward(x, train=True, rng=rng)
            loss, grad = bce_jaccard_loss(p, t, config.loss_epsilon)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {batch_index}",
                    epoch=epoch, batch=batch_index)
            model.backward(grad)
            try:
                optimizer.step(dict(model.named_grads()), lr=lr)
            except TrainingDiverged as exc:
                raise TrainingDiverged(
                    f"{exc} (epoch {epoch}, batch {batch_index})",
                    epoch=epoch, batch=batch_index, parameter=exc.parameter) from exc
            epoch_loss += loss * len(chunk)

        val_loss, val_jaccard = _forward_loss(
            model, val_pairs, config.batch_size, config.loss_epsilon)
        history.records.append(EpochRecord(
            epoch, epoch_loss / len(train_pairs), val_loss, val_jaccard, lr))
        if log is not None:
            log(history.records[-1])

        if best_epoch == 0 or val_loss < min(
                r.val_loss for r in history.records[:-1]):
            best = _snapshot(model)
            best_epoch = epoch

        stop = stopper.update(val_loss)
        lr = scheduler.update(val_loss)
        if stop:
            history.stop_reason = "early_stop"
            break
    else:
        history.stop_reason = "max_epochs"

    history.best_epoch = best_epoch
    _restore(model, best)
    return model, history
