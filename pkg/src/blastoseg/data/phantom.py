"""Synthetic zona-ablated blastocyst phantoms with exact ground truth.

Each sequence renders a fixed bright zona ring (with a slit-shaped gap cut
at ``slit_angle``), an embryo body ellipse that expands frame by frame, and
a herniated lobe that grows through the slit, riding on the body boundary.
The ground-truth mask is the accumulated tissue region (body union lobe,
which never shrinks), so mask area is non-decreasing by construction.
Optional Gaussian noise and debris blobs (always placed outside the final
mask) decorate the image. Everything is a pure function of the PhantomSpec,
including its seed.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ValidationError
from .dataset import SamplePair

BACKGROUND_LEVEL = 30
TISSUE_LEVEL = 120
ZONA_LEVEL = 200
DEBRIS_LEVEL = 170


@dataclass
class PhantomSpec:
    image_size: int
    frames: int
    center: tuple
    body_start: tuple      # semi-axes (a, b) at the first frame, pixels
    body_end: tuple        # semi-axes at the last frame; also the zona inner edge
    zona_thickness: float
    slit_angle: float      # direction of the ablation slit, radians
    slit_half_width: float # angular half width of the slit, radians
    lobe_radius: float     # herniated lobe radius at the last frame, pixels
    noise_level: float = 0.0
    debris_count: int = 0
    seed: int = 0
    source_id: str = "phantom"

    def __post_init__(self):
        s = self.image_size
        if s < 32:
            raise ValidationError(f"image_size must be >= 32, got {s}")
        if self.frames < 1:
            raise ValidationError(f"frames must be >= 1, got {self.frames}")
        if self.center is None:
            self.center = ((s - 1) / 2.0, (s - 1) / 2.0)
        self.center = (float(self.center[0]), float(self.center[1]))
        self.body_start = (float(self.body_start[0]), float(self.body_start[1]))
        self.body_end = (float(self.body_end[0]), float(self.body_end[1]))
        if min(self.body_start) <= 0 or min(self.body_end) <= 0:
            raise ValidationError("body semi-axes must be positive")
        if self.body_start[0] > self.body_end[0] or self.body_start[1] > self.body_end[1]:
            raise ValidationError("body must not shrink: body_start exceeds body_end")
        if self.zona_thickness <= 0:
            raise ValidationError("zona_thickness must be positive")
        if self.lobe_radius < 0 or self.noise_level < 0 or self.debris_count < 0:
            raise ValidationError("lobe_radius, noise_level and debris_count "
                                  "must be non-negative")
        if self.lobe_radius > 0:
            if not 0 < self.slit_half_width < 1.2:
                raise ValidationError(
                    f"slit_half_width {self.slit_half_width} cannot pass a lobe; "
                    "expected a value in (0, 1.2) radians")
            opening = 2.0 * math.sin(self.slit_half_width) * min(self.body_end)
            if opening < 0.5 * self.lobe_radius:
                raise ValidationError(
                    f"slit opening {opening:.1f}px is too narrow for a lobe of "
                    f"radius {self.lobe_radius:.1f}px")
        extent = max(self.body_end) + max(self.zona_thickness, 1.5 * self.lobe_radius)
        cx, cy = self.center
        room = min(cx, cy, s - 1 - cx, s - 1 - cy)
        if extent + 2 > room:
            raise ValidationError(
                f"phantom extent {extent:.1f}px does not fit: only {room:.1f}px "
                f"from center to the nearest border of a {s}px frame")

    def to_dict(self):
        d = asdict(self)
        for key in ("center", "body_start", "body_end"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if k in ("center", "body_start", "body_end") else v
                      for k, v in d.items()})


def default_phantom_spec(image_size=500, frames=30, *, seed=0, source_id="b000",
                         noise_level=6.0, debris_count=2):
    s = image_size
    body_end = (0.28 * s, 0.25 * s)
    return PhantomSpec(
        image_size=s,
        frames=frames,
        center=None,
        body_start=(0.78 * body_end[0], 0.78 * body_end[1]),
        body_end=body_end,
        zona_thickness=0.05 * s,
        slit_angle=0.9,
        slit_half_width=0.22,
        lobe_radius=0.075 * s,
        noise_level=noise_level,
        debris_count=debris_count,
        seed=seed,
        source_id=source_id,
    )


def _growth(spec, t):
    u = 1.0 if spec.frames == 1 else t / (spec.frames - 1)
    a = spec.body_start[0] + u * (spec.body_end[0] - spec.body_start[0])
    b = spec.body_start[1] + u * (spec.body_end[1] - spec.body_start[1])
    return a, b, u * spec.lobe_radius


def _ellipse_boundary_radius(a, b, theta):
    return a * b / math.hypot(b * math.cos(theta), a * math.sin(theta))


def _frame_membership(spec, t, ys, xs):
    """Bool grid of body union lobe at frame t (no accumulation)."""
    cx, cy = spec.center
    a, b, lobe_r = _growth(spec, t)
    member = ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0
    if lobe_r > 0:
        reach = _ellipse_boundary_radius(a, b, spec.slit_angle) + 0.5 * lobe_r
        lx = cx + reach * math.cos(spec.slit_angle)
        ly = cy + reach * math.sin(spec.slit_angle)
        member |= (xs - lx) ** 2 + (ys - ly) ** 2 <= lobe_r**2
    return member


def _ring_membership(spec, ys, xs):
    cx, cy = spec.center
    ai, bi = spec.body_end
    ao, bo = ai + spec.zona_thickness, bi + spec.zona_thickness
    inner = ((xs - cx) / ai) ** 2 + ((ys - cy) / bi) ** 2 <= 1.0
    outer = ((xs - cx) / ao) ** 2 + ((ys - cy) / bo) ** 2 <= 1.0
    ring = outer & ~inner
    if spec.slit_half_width > 0:
        phi = np.arctan2(ys - cy, xs - cx)
        delta = np.mod(phi - spec.slit_angle + np.pi, 2 * np.pi) - np.pi
        ring &= np.abs(delta) > spec.slit_half_width
    return ring


def _sample_debris(spec, rng, exclusion, ys, xs):
    """Draw debris blob geometry outside the exclusion region (final mask
    plus zona). Placement retries up to 200 times per blob, then skips."""
    s = spec.image_size
    r_lo = max(2.0, s / 100.0)
    r_hi = max(3.0, s / 40.0)
    blobs = []
    for _ in range(spec.debris_count):
        for _attempt in range(200):
            bx = rng.uniform(r_hi + 1, s - 2 - r_hi)
            by = rng.uniform(r_hi + 1, s - 2 - r_hi)
            br = rng.uniform(r_lo, r_hi)
            grown = (xs - bx) ** 2 + (ys - by) ** 2 <= (br + 2.0) ** 2
            if not np.any(grown & exclusion):
                blobs.append((bx, by, br))
                break
    return blobs


def _render_sequence(spec):
    """All frames of one phantom: (list of images, list of masks)."""
    s = spec.image_size
    ys, xs = np.indices((s, s), dtype=np.float64)
    regions = []
    acc = np.zeros((s, s), dtype=bool)
    for t in range(spec.frames):
        acc = acc | _frame_membership(spec, t, ys, xs)
        regions.append(acc)
    ring = _ring_membership(spec, ys, xs)

    rng = np.random.default_rng(spec.seed)
    exclusion = regions[-1] | ring
    blobs = _sample_debris(spec, rng, exclusion, ys, xs)
    debris = np.zeros((s, s), dtype=bool)
    for bx, by, br in blobs:
        debris |= (xs - bx) ** 2 + (ys - by) ** 2 <= br**2

    images, masks = [], []
    for t in range(spec.frames):
        base = np.full((s, s), float(BACKGROUND_LEVEL))
        base[ring] = ZONA_LEVEL
        base[debris] = DEBRIS_LEVEL
        base[regions[t]] = TISSUE_LEVEL
        if spec.noise_level > 0:
            base = base + rng.normal(0.0, spec.noise_level, size=base.shape)
        images.append(np.clip(np.rint(base), 0, 255).astype(np.uint8))
        masks.append(np.where(regions[t], 255, 0).astype(np.uint8))
    return images, masks


def render_frame(spec, t):
    """(image, mask) of frame ``t``; identical to generate_phantoms(spec)[t]."""
    if not 0 <= t < spec.frames:
        raise ValidationError(f"frame {t} outside [0, {spec.frames})")
    images, masks = _render_sequence(spec)
    return images[t], masks[t]


def generate_phantoms(spec):
    """One blastocyst sequence as a list of SamplePairs."""
    images, masks = _render_sequence(spec)
    return [SamplePair(img, msk, spec.source_id, t)
            for t, (img, msk) in enumerate(zip(images, masks))]


def generate_dataset(n_blastocysts, frames=31, image_size=500, *, noise_level=6.0,
                     debris_count=3, seed=0):
    """A whole dataset of phantoms with per-blastocyst varied geometry.

    Returns (pairs, specs). Geometry parameters are drawn from ranges that
    always satisfy spec validation for image_size >= 48.
    """
    if n_blastocysts < 1:
        raise ValidationError(f"n_blastocysts must be >= 1, got {n_blastocysts}")
    rng = np.random.default_rng(seed)
    s = image_size
    pairs = []
    specs = []
    for i in range(n_blastocysts):
        a_end = rng.uniform(0.25, 0.30) * s
        b_end = rng.uniform(0.23, 0.27) * s
        start = rng.uniform(0.70, 0.85)
        jitter = rng.uniform(-0.015, 0.015, size=2) * s
        spec = PhantomSpec(
            image_size=s,
            frames=frames,
            center=((s - 1) / 2.0 + jitter[0], (s - 1) / 2.0 + jitter[1]),
            body_start=(start * a_end, start * b_end),
            body_end=(a_end, b_end),
            zona_thickness=rng.uniform(0.045, 0.055) * s,
            slit_angle=rng.uniform(0.0, 2.0 * math.pi),
            slit_half_width=rng.uniform(0.18, 0.26),
            lobe_radius=rng.uniform(0.06, 0.085) * s,
            noise_level=noise_level,
            debris_count=debris_count,
            seed=int(rng.integers(2**31)),
            source_id=f"b{i:03d}",
        )
        specs.append(spec)
        pairs.extend(generate_phantoms(spec))
    return pairs, specs
