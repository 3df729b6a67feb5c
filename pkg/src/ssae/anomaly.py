"""Residuals, multi-scale aggregation and score maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError, ParameterError
from .models import EncoderDecoder, ScaleSpaceModel, reconstruct_levels
from .pyramid import as_image, collapse, level_images, upsample


@dataclass
class ResidualStack:
    residuals: list[np.ndarray]  # r_0 .. r_K, signed, at their native level sizes
    aggregated: np.ndarray | None = None

    @property
    def levels(self) -> int:
        return len(self.residuals) - 1


@dataclass
class ScoreMap:
    scores: np.ndarray
    provenance: str
    postprocessing: list[str] = field(default_factory=list)


@dataclass
class SegmentationMask:
    mask: np.ndarray
    threshold: float


def residual_stack(model: ScaleSpaceModel, x) -> ResidualStack:
    """r_k = I_k - Î_k for k = 0..K."""
    targets = level_images(x, model.levels, model.kernel)
    recon = reconstruct_levels(model, x)
    return ResidualStack([i - r for i, r in zip(targets, recon)])


def baseline_residual_stack(models: list[EncoderDecoder], x, kernel) -> ResidualStack:
    """Residuals of plain autoencoders, one per resolution, on the Gaussian stack of ``x``."""
    targets = level_images(x, len(models) - 1, kernel)
    return ResidualStack([t - m(t) for m, t in zip(models, targets)])


def aggregate(stack: ResidualStack, per_level_abs: bool = False) -> np.ndarray:
    """Recursive upsample-and-add of r_K .. r_0 into one full-resolution map."""
    if not stack.residuals or any(r is None for r in stack.residuals):
        raise ContractError("aggregation needs the full residual stack r_0..r_K")
    res = [np.abs(r) for r in stack.residuals] if per_level_abs else stack.residuals
    stack.aggregated = collapse(res[-1], res[:-1])
    return stack.aggregated


def to_native(img, level: int) -> np.ndarray:
    """Bilinearly upsample a level-``level`` map back to full resolution."""
    out = as_image(img)
    for _ in range(level):
        out = upsample(out)
    return out


def median_filter(img, radius: int) -> np.ndarray:
    """Square median filter of side 2*radius + 1, mirrored about the edge pixel."""
    img = as_image(img)
    if radius == 0:
        return img.copy()
    side = 2 * radius + 1
    size = (1,) * (img.ndim - 2) + (side, side)
    return ndimage.median_filter(img, size=size, mode="mirror")


def score_map(residual, filter_radius: int = 2, provenance: str = "level0", sign: str = "abs") -> ScoreMap:
    if filter_radius < 0:
        raise ParameterError(f"filter_radius must be >= 0, got {filter_radius}")
    residual = as_image(residual)
    if sign == "abs":
        scores, steps = np.abs(residual), ["abs"]
    elif sign == "positive":
        scores, steps = np.maximum(residual, 0.0), ["positive-part"]
    else:
        raise ParameterError(f"unknown sign handling {sign!r}")
    if filter_radius:
        scores = median_filter(scores, filter_radius)
        steps.append(f"median{2 * filter_radius + 1}x{2 * filter_radius + 1}")
    return ScoreMap(scores, provenance, steps)


def binarize(scores: ScoreMap | np.ndarray, threshold: float) -> SegmentationMask:
    if not np.isfinite(threshold):
        raise ParameterError(f"threshold must be finite, got {threshold}")
    arr = scores.scores if isinstance(scores, ScoreMap) else np.asarray(scores)
    return SegmentationMask((arr > threshold).astype(np.float64), float(threshold))


def score_maps(model: ScaleSpaceModel, x, filter_radius: int = 2, sign: str = "abs", per_level_abs: bool = False) -> dict[str, ScoreMap]:
    """Score maps for every level (at native resolution) plus the aggregated map.

    Keys are ``"level<k>"`` and ``"aggregated"``. Per-level maps are
    upsampled to full resolution after the absolute value and filtering.
    """
    stack = residual_stack(model, x)
    out = {}
    for k, r in enumerate(stack.residuals):
        sm = score_map(r, filter_radius, f"level{k}", sign)
        if k:
            sm.scores = to_native(sm.scores, k)
            sm.postprocessing.append(f"bilinear-x{2**k}")
        out[sm.provenance] = sm
    out["aggregated"] = score_map(aggregate(stack, per_level_abs), filter_radius, "aggregated", sign)
    return out
