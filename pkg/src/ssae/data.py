"""Synthetic brain-like phantoms, lesion injection and intensity normalization."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import DataError, ParameterError

ANOMALY_KINDS = ("none", "small-multifocal", "large-homogeneous")
TISSUE_FRACTION = 0.05


@dataclass
class SynthConfig:
    size: int = 64
    levels: int = 3
    # ellipse semi-axes as fractions of the image side
    axis_range: tuple[float, float] = (0.32, 0.45)
    eccentricity_range: tuple[float, float] = (0.75, 1.0)
    texture_scale: float = 2.0
    texture_amplitude: float = 0.04
    anomaly: str = "none"
    delta: float = 0.4
    count_range: tuple[int, int] = (1, 8)
    radius_range: tuple[float, float] = (1.0, 4.0)
    large_radius_range: tuple[float, float] = (8.0, 16.0)
    max_placement_tries: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.anomaly not in ANOMALY_KINDS:
            raise ParameterError(f"unknown anomaly kind {self.anomaly!r}")
        if self.size % 2**self.levels:
            raise ParameterError(f"size {self.size} not divisible by 2^{self.levels}")
        if max(self.radius_range[1], self.large_radius_range[1] * self.size / 64) >= self.size / 2:
            raise ParameterError("anomaly radii must stay below half the image size")
        if not 0 < self.axis_range[0] <= self.axis_range[1] < 0.5:
            raise ParameterError(f"axis_range {self.axis_range} must lie in (0, 0.5)")

    @classmethod
    def from_dict(cls, d: dict | None) -> "SynthConfig":
        d = dict(d or {})
        for key in ("axis_range", "eccentricity_range", "count_range", "radius_range", "large_radius_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    image: np.ndarray
    gt_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    tissue: np.ndarray | None = None

    def __post_init__(self):
        if self.gt_mask is not None and self.gt_mask.shape != self.image.shape:
            raise DataError(f"gt shape {self.gt_mask.shape} differs from image {self.image.shape}")


def ellipse_mask(size, center, axes, angle) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - center[0], xx - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / axes[1]) ** 2 + (v / axes[0]) ** 2 <= 1.0


def _band_limited_noise(rng, size, scale):
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), scale, mode="wrap")
    return noise / (noise.std() + 1e-12)


def synth_healthy(config: SynthConfig, seed: int | None = None) -> Sample:
    """Elliptical 'brain' with ventricles, a smooth bias field and band-limited texture."""
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    size = config.size
    a = rng.uniform(*config.axis_range) * size
    b = a * rng.uniform(*config.eccentricity_range)
    angle = rng.uniform(-0.3, 0.3)
    center = size / 2 + rng.uniform(-0.04, 0.04, size=2) * size
    tissue = ellipse_mask(size, center, (a, b), angle)

    yy, xx = np.mgrid[0:size, 0:size] / size - 0.5
    gy, gx = rng.uniform(-0.15, 0.15, size=2)
    img = 0.6 + gy * yy + gx * xx
    # cortical rim: brighter band near the boundary
    dist = ndimage.distance_transform_edt(tissue)
    rim_width = rng.uniform(2.0, 3.5) * size / 64
    img = img + 0.2 * np.exp(-((dist - rim_width) ** 2) / (2 * (rim_width * 0.6) ** 2))
    # paired dark ventricles
    vent_axes = (a * rng.uniform(0.25, 0.35), b * rng.uniform(0.06, 0.1))
    for side in (-1, 1):
        vc = center + np.array([0.0, side * b * rng.uniform(0.12, 0.2)])
        img = np.where(ellipse_mask(size, vc, vent_axes, angle), 0.25, img)
    img = ndimage.gaussian_filter(img, 0.7)
    img = img + config.texture_amplitude * _band_limited_noise(rng, size, config.texture_scale * size / 64)
    img = np.clip(img, 0.05, None) * tissue
    img = normalize_p98(img)
    return Sample(
        image=img,
        gt_mask=np.zeros_like(img),
        meta={"seed": seed, "kind": "none", "tissue_area": float(np.pi * a * b)},
        tissue=tissue,
    )


def _place(rng, tissue, radius, tries):
    inner = ndimage.distance_transform_edt(tissue)
    for _ in range(tries):
        cy, cx = rng.uniform(0, tissue.shape[0], size=2)
        iy, ix = int(cy), int(cx)
        if inner[iy, ix] > radius + 1.0:
            return np.array([cy, cx])
    raise DataError(f"could not place an anomaly of radius {radius:.1f} inside tissue after {tries} tries")


def inject_anomaly(sample: Sample, config: SynthConfig, seed: int | None = None) -> Sample:
    """Add lesions of ``config.anomaly`` kind; gt marks pixels changed by more than delta/2."""
    if config.anomaly == "none":
        return replace(sample, gt_mask=np.zeros_like(sample.image), meta={**sample.meta, "kind": "none"})
    seed = sample.meta.get("seed", config.seed) if seed is None else seed
    rng = np.random.default_rng([seed, 1])
    tissue = sample.tissue if sample.tissue is not None else sample.image > 0
    size = sample.image.shape[0]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    lesion = np.zeros_like(sample.image)
    lesions = []
    if config.anomaly == "small-multifocal":
        count = rng.integers(config.count_range[0], config.count_range[1] + 1)
        for _ in range(count):
            r = rng.uniform(*config.radius_range)
            c = _place(rng, tissue, 2 * r, config.max_placement_tries)
            sigma = r / np.sqrt(2 * np.log(2))  # profile crosses delta/2 at distance r
            d2 = (yy - c[0]) ** 2 + (xx - c[1]) ** 2
            blob = np.exp(-d2 / (2 * sigma**2)) * (d2 <= (2 * r) ** 2)
            lesion = np.maximum(lesion, blob)
            lesions.append({"center": c.tolist(), "radius": r})
    else:
        scale = size / 64
        r = rng.uniform(*config.large_radius_range) * scale
        c = _place(rng, tissue, r, config.max_placement_tries)
        d = np.sqrt((yy - c[0]) ** 2 + (xx - c[1]) ** 2)
        lesion = np.clip(r + 0.5 - d, 0.0, 1.0)
        lesions.append({"center": c.tolist(), "radius": r})
    lesion *= tissue
    # no upper clip: a saturated lesion would lose its ground truth
    image = sample.image + config.delta * lesion
    gt = (image - sample.image > config.delta / 2).astype(np.float64)
    meta = {**sample.meta, "kind": config.anomaly, "lesions": lesions}
    return Sample(image=image, gt_mask=gt, meta=meta, tissue=tissue)


def normalize_p98(image, percentile: float = 98.0) -> np.ndarray:
    """Scale by the 98th percentile of the nonzero values and clip to [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    nonzero = arr[arr != 0]
    if nonzero.size == 0:
        raise DataError("cannot normalize an all-zero image")
    ref = np.percentile(nonzero, percentile, method="linear")
    if ref <= 0:
        raise DataError(f"98th percentile of nonzero values is {ref}, expected positive")
    return np.clip(arr / ref, 0.0, 1.0)


def tissue_fraction(image) -> float:
    arr = np.asarray(image)
    return float(np.count_nonzero(arr)) / arr.size


def slice_filter(slices, min_fraction: float = TISSUE_FRACTION) -> list:
    """Keep slices whose nonzero-pixel fraction is at least ``min_fraction``."""
    return [s for s in slices if tissue_fraction(s) >= min_fraction]


def generate_corpus(config: SynthConfig, count: int, seed: int | None = None) -> list[Sample]:
    """``count`` samples with per-sample seeds ``seed, seed + 1, ...``."""
    base = config.seed if seed is None else seed
    out = []
    for i in range(count):
        sample = synth_healthy(config, seed=base + i)
        if config.anomaly != "none":
            sample = inject_anomaly(sample, config)
        out.append(sample)
    return out


def stack_images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples])


def stack_masks(samples) -> np.ndarray:
    return np.stack([s.gt_mask for s in samples])
