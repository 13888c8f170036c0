"""Pixel metrics, test-set evaluation, threshold sweeps, and overlays.

Binarization uses p >= threshold (boundary positive). Predictions are made
at the model's working resolution, thresholded there, and the binary mask is
restored to the pair's native resolution with nearest-neighbor interpolation
before comparison against the ground truth.

Zero-denominator metrics are reported as None (an explicit undefined
marker); macro averaging skips undefined entries and counts how many were
skipped per metric.
"""

from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigurationError, DimensionError, ValidationError
from .data.pipeline import batch_from_pairs, prepare_pairs, resize
from .models import EnsembleSpec, ModelGraph, ensemble_predict, predict

DEFAULT_THRESHOLD = 0.5
SWEEP_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))
METRIC_NAMES = ("accuracy", "precision", "recall", "dice", "jaccard")

DARK_CYAN = (0, 139, 139)
LIGHT_GREEN = (144, 238, 144)
YELLOW = (255, 255, 0)
RED = (255, 0, 0)
CAPTION_WHITE = (255, 255, 255)

# Category bounds pinned half-open so every Jaccard value in [0, 1] lands in
# exactly one bucket: best (0.97, 1], better (0.95, 0.97], fair [0.90, 0.95],
# below_fair [0, 0.90).
CATEGORY_NAMES = ("best", "better", "fair", "below_fair")


@dataclass(frozen=True)
class MetricsCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            if getattr(self, name) < 0:
                raise ValidationError(f"count {name} must be >= 0")

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other):
        return MetricsCounts(self.tp + other.tp, self.tn + other.tn,
                             self.fp + other.fp, self.fn + other.fn)


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    dice: float
    jaccard: float
    scope: str = "per_image"

    def as_dict(self):
        return {name: getattr(self, name) for name in METRIC_NAMES}


@dataclass
class ImageResult:
    source_id: str
    frame_index: int
    threshold: float
    counts: MetricsCounts
    report: MetricsReport
    category: str


@dataclass
class TestsetReport:
    threshold: float
    per_image: list
    micro: MetricsReport
    macro: MetricsReport
    macro_skipped: dict
    categories: dict
    uncategorized: int = 0

    @property
    def category_fractions(self):
        n = sum(self.categories.values())
        return {k: (v / n if n else 0.0) for k, v in self.categories.items()}


@dataclass
class SweepResult:
    rows: list
    best_threshold: float
    insensitive_04_06: bool
    jaccard_04_06_spread: float = field(default=0.0)


def binarize(prob_map, threshold=DEFAULT_THRESHOLD):
    """Positive where probability >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must be in (0, 1), got {threshold}")
    return np.asarray(prob_map) >= threshold


def confusion(pred, gt):
    """Exact TP/TN/FP/FN pixel counts; nonzero means positive."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(
            f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    p = pred != 0
    g = gt != 0
    return MetricsCounts(
        tp=int(np.sum(p & g)),
        tn=int(np.sum(~p & ~g)),
        fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)),
    )


def metrics(counts, scope="per_image"):
    """The five ratios from raw counts; None marks undefined (0/0) values."""
    if counts.total == 0:
        raise ValidationError("metrics of all-zero counts are undefined")

    def ratio(num, den):
        return num / den if den else None

    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    return MetricsReport(
        accuracy=(tp + tn) / counts.total,
        precision=ratio(tp, tp + fp),
        recall=ratio(tp, tp + fn),
        dice=ratio(2 * tp, 2 * tp + fp + fn),
        jaccard=ratio(tp, tp + fp + fn),
        scope=scope,
    )


def dice_from_jaccard(jaccard):
    return 2.0 * jaccard / (jaccard + 1.0)


def categorize(jaccard):
    if not 0.0 <= jaccard <= 1.0:
        raise ValidationError(f"jaccard {jaccard} outside [0, 1]")
    if jaccard > 0.97:
        return "best"
    if jaccard > 0.95:
        return "better"
    if jaccard >= 0.90:
        return "fair"
    return "below_fair"


def _as_predictor(model_or_ensemble, working_size):
    if isinstance(model_or_ensemble, ModelGraph):
        h, w = model_or_ensemble.input_shape
        if h != w:
            raise ConfigurationError("evaluation expects a square working resolution")
        return lambda batch: predict(model_or_ensemble, batch), h
    if isinstance(model_or_ensemble, EnsembleSpec):
        h, w = model_or_ensemble.members[0].input_shape
        if h != w:
            raise ConfigurationError("evaluation expects a square working resolution")
        return lambda batch: ensemble_predict(model_or_ensemble, batch), h
    if callable(model_or_ensemble):
        if working_size is None:
            raise ConfigurationError(
                "a bare predictor callable needs an explicit working_size")
        return model_or_ensemble, working_size
    raise ConfigurationError(
        f"cannot evaluate object of type {type(model_or_ensemble).__name__}")


def predict_probabilities(model_or_ensemble, pairs, *, working_size=None,
                          batch_size=16):
    """Working-resolution probability maps, one (h, w) float32 array per pair."""
    predictor, size = _as_predictor(model_or_ensemble, working_size)
    prepared = prepare_pairs(pairs, size)
    probs = []
    for start in range(0, len(prepared), batch_size):
        x, _ = batch_from_pairs(prepared[start : start + batch_size])
        p = predictor(x)
        probs.extend(p[i, 0] for i in range(p.shape[0]))
    return probs


def _result_for_pair(pair, prob, threshold):
    hard = binarize(prob, threshold)
    working = np.where(hard, 255, 0).astype(np.uint8)
    native = working if working.shape == pair.mask.shape else resize(
        working, pair.mask.shape[0], "mask")
    counts = confusion(native, pair.mask)
    report = metrics(counts)
    category = categorize(report.jaccard) if report.jaccard is not None else "undefined"
    return ImageResult(pair.source_id, pair.frame_index, threshold,
                       counts, report, category)


def report_from_probabilities(pairs, probs, threshold=DEFAULT_THRESHOLD):
    """Assemble the full test-set report from precomputed probability maps."""
    per_image = [_result_for_pair(pair, prob, threshold)
                 for pair, prob in zip(pairs, probs)]
    micro_counts = MetricsCounts(0, 0, 0, 0)
    for result in per_image:
        micro_counts = micro_counts + result.counts
    micro = metrics(micro_counts, scope="micro_aggregate")

    macro_values = {}
    macro_skipped = {}
    for name in METRIC_NAMES:
        values = [getattr(r.report, name) for r in per_image]
        defined = [v for v in values if v is not None]
        macro_values[name] = sum(defined) / len(defined) if defined else None
        macro_skipped[name] = len(values) - len(defined)
    macro = MetricsReport(scope="macro_average", **macro_values)

    categories = {name: 0 for name in CATEGORY_NAMES}
    uncategorized = 0
    for result in per_image:
        if result.category == "undefined":
            uncategorized += 1
        else:
            categories[result.category] += 1

    return TestsetReport(
        threshold=threshold,
        per_image=per_image,
        micro=micro,
        macro=macro,
        macro_skipped=macro_skipped,
        categories=categories,
        uncategorized=uncategorized,
    )


def evaluate_testset(model_or_ensemble, test_pairs, threshold=DEFAULT_THRESHOLD,
                     *, working_size=None, batch_size=16, return_probs=False):
    """Evaluate on a frozen test set; see the module docstring for the
    resolution protocol."""
    test_pairs = list(test_pairs)
    if not test_pairs:
        raise ConfigurationError("test set is empty")
    probs = predict_probabilities(model_or_ensemble, test_pairs,
                                  working_size=working_size, batch_size=batch_size)
    report = report_from_probabilities(test_pairs, probs, threshold)
    if return_probs:
        return report, probs
    return report


def threshold_sweep(model_or_ensemble, pairs, grid=SWEEP_GRID, *,
                    working_size=None, batch_size=16):
    """Micro Jaccard across a threshold grid, plus the 0.4-0.6 stability flag.

    The argmax threshold breaks ties toward the lower value. The flag is
    computed at exactly {0.4, 0.5, 0.6} regardless of the grid.
    """
    pairs = list(pairs)
    if not pairs:
        raise ConfigurationError("sweep needs a non-empty pair list")
    probs = predict_probabilities(model_or_ensemble, pairs,
                                  working_size=working_size, batch_size=batch_size)

    def micro_jaccard(threshold):
        report = report_from_probabilities(pairs, probs, threshold)
        return report.micro.jaccard

    rows = [(float(t), micro_jaccard(float(t))) for t in grid]
    best_threshold = max(rows, key=lambda row: (row[1], -row[0]))[0]
    stability = [micro_jaccard(t) for t in (0.4, 0.5, 0.6)]
    spread = max(stability) - min(stability)
    return SweepResult(rows, best_threshold, bool(spread < 0.01), float(spread))


def _contour(gt):
    """8-connected boundary: mask pixels with at least one background pixel
    among their eight neighbors (frame edges count as background)."""
    padded = np.pad(gt, 1, constant_values=False)
    interior = np.ones_like(gt)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            interior &= padded[1 + dy : 1 + dy + gt.shape[0],
                               1 + dx : 1 + dx + gt.shape[1]]
    return gt & ~interior


def render_overlay(image, gt, pred, jaccard=None, dice=None):
    """Color comparison raster in the pinned palette.

    Background dark cyan, ground-truth-only light green, predicted region
    yellow, ground-truth contour red drawn last. ``image`` fixes the expected
    raster geometry. When ``jaccard`` is given, a caption like
    "JI 95.0% DC 97.4%" is drawn in white (dice derived from jaccard when
    omitted).
    """
    image = np.asarray(image)
    gt = np.asarray(gt) != 0
    pred = np.asarray(pred) != 0
    if image.shape != gt.shape:
        raise DimensionError(
            f"image shape {image.shape} does not match ground truth {gt.shape}")
    if gt.shape != pred.shape:
        raise DimensionError(
            f"ground truth shape {gt.shape} does not match prediction {pred.shape}")

    out = np.empty(gt.shape + (3,), dtype=np.uint8)
    out[:] = DARK_CYAN
    out[gt & ~pred] = LIGHT_GREEN
    out[pred] = YELLOW
    out[_contour(gt)] = RED

    if jaccard is None:
        return out
    if dice is None:
        dice = dice_from_jaccard(jaccard)
    canvas = Image.fromarray(out)
    draw = ImageDraw.Draw(canvas)
    draw.fontmode = "1"  # bilevel glyphs: caption pixels stay pure white
    draw.text((3, 3), f"JI {100 * jaccard:.1f}% DC {100 * dice:.1f}%",
              fill=CAPTION_WHITE)
    return np.asarray(canvas)


def _fmt(value):
    return "undefined" if value is None else repr(value)


def write_report_csv(report, path):
    """Per-image rows followed by a summary block, all in one CSV file."""
    lines = ["source_id,frame_index,threshold,tp,tn,fp,fn,"
             "accuracy,precision,recall,dice,jaccard,category"]
    for r in report.per_image:
        m = r.report
        lines.append(
            f"{r.source_id},{r.frame_index},{r.threshold!r},"
            f"{r.counts.tp},{r.counts.tn},{r.counts.fp},{r.counts.fn},"
            f"{_fmt(m.accuracy)},{_fmt(m.precision)},{_fmt(m.recall)},"
            f"{_fmt(m.dice)},{_fmt(m.jaccard)},{r.category}")
    lines.append("")
    lines.append("# summary")
    lines.append("scope," + ",".join(METRIC_NAMES))
    for scope_name, scoped in (("micro", report.micro), ("macro", report.macro)):
        values = ",".join(_fmt(getattr(scoped, name)) for name in METRIC_NAMES)
        lines.append(f"{scope_name},{values}")
    lines.append("macro_skipped," + ",".join(
        str(report.macro_skipped[name]) for name in METRIC_NAMES))
    lines.append("")
    lines.append("category,count,fraction")
    fractions = report.category_fractions
    for name in CATEGORY_NAMES:
        lines.append(f"{name},{report.categories[name]},{fractions[name]!r}")
    lines.append(f"uncategorized,{report.uncategorized},")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def save_overlay_png(path, overlay):
    Image.fromarray(overlay, mode="RGB").save(path)
    return path
