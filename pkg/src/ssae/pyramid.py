"""Laplacian pyramid codec.

Images are 2-D float64 arrays; every operator also accepts a stack of images
with arbitrary leading axes and acts on the last two axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .errors import ParameterError, ShapeError

KERNEL_TAPS = 5
_HALF_WIDTH = 2.5  # outer edge of the outermost tap cell


@dataclass(frozen=True)
class GaussianKernel1D:
    taps: np.ndarray
    sigma: float

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.shape != (KERNEL_TAPS,):
            raise ParameterError(f"expected {KERNEL_TAPS} taps, got shape {taps.shape}")
        object.__setattr__(self, "taps", taps)


def gaussian_kernel(coverage: float = 0.99) -> GaussianKernel1D:
    """Length-5 Gaussian whose mass inside [-2.5, 2.5] is at least ``coverage``.

    The largest admissible sigma is chosen, i.e. ``2*Phi(2.5/sigma) - 1 == coverage``.
    """
    if not 0.5 < coverage < 1.0:
        raise ParameterError(f"coverage must lie in (0.5, 1), got {coverage}")
    sigma = _HALF_WIDTH / NormalDist().inv_cdf(0.5 * (1.0 + coverage))
    offsets = np.arange(KERNEL_TAPS, dtype=np.float64) - KERNEL_TAPS // 2
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    taps /= taps.sum()
    return GaussianKernel1D(taps=taps, sigma=sigma)


def as_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim < 2:
        raise ShapeError(f"image needs at least 2 dimensions, got shape {arr.shape}")
    if arr.shape[-1] < 1 or arr.shape[-2] < 1:
        raise ShapeError(f"empty image of shape {arr.shape}")
    return arr


def _correlate_axis(img: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    r = len(taps) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="reflect") if img.shape[axis] > 1 else np.pad(img, pad, mode="edge")
    n = img.shape[axis]
    out = np.zeros_like(img)
    for j, w in enumerate(taps):
        out += w * np.take(padded, np.arange(j, j + n), axis=axis)
    return out


def smooth(img, kernel: GaussianKernel1D) -> np.ndarray:
    """Separable Gaussian blur, mirrored about the edge pixel at the borders."""
    img = as_image(img)
    return _correlate_axis(_correlate_axis(img, kernel.taps, -1), kernel.taps, -2)


def downsample(img) -> np.ndarray:
    img = as_image(img)
    h, w = img.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"downsample needs even dimensions, got {h}x{w}")
    return img[..., ::2, ::2].copy()


def _upsample_axis(img: np.ndarray, axis: int) -> np.ndarray:
    # output 2i samples source i - 1/4, output 2i+1 samples i + 1/4 (edges clamped)
    n = img.shape[axis]
    prev = np.take(img, np.maximum(np.arange(n) - 1, 0), axis=axis)
    nxt = np.take(img, np.minimum(np.arange(n) + 1, n - 1), axis=axis)
    even = 0.75 * img + 0.25 * prev
    odd = 0.75 * img + 0.25 * nxt
    out = np.stack([even, odd], axis=axis % img.ndim + 1)
    shape = list(img.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def upsample(img) -> np.ndarray:
    """Bilinear 2x upsampling; output pixel p reads source coordinate (p + 0.5)/2 - 0.5."""
    img = as_image(img)
    return _upsample_axis(_upsample_axis(img, -1), -2)


@dataclass
class LaplacianPyramid:
    base: np.ndarray
    highs: list[np.ndarray] = field(default_factory=list)

    @property
    def levels(self) -> int:
        return len(self.highs)

    def bands(self) -> list[np.ndarray]:
        """``[H_0, ..., H_{K-1}, I_K]``."""
        return [*self.highs, self.base]


def _check_divisible(x: np.ndarray, levels: int) -> None:
    if levels < 1:
        raise ParameterError(f"pyramid needs at least one level, got {levels}")
    h, w = x.shape[-2:]
    step = 2**levels
    if h % step or w % step:
        raise ShapeError(f"{h}x{w} image is not divisible by 2^{levels}")


def level_images(x, levels: int, kernel: GaussianKernel1D) -> list[np.ndarray]:
    """Gaussian stack ``[I_0, ..., I_K]``."""
    x = as_image(x)
    _check_divisible(x, levels)
    out = [x]
    for _ in range(levels):
        out.append(downsample(smooth(out[-1], kernel)))
    return out


def build_pyramid(x, levels: int, kernel: GaussianKernel1D) -> LaplacianPyramid:
    imgs = level_images(x, levels, kernel)
    highs = [imgs[k] - upsample(imgs[k + 1]) for k in range(levels)]
    return LaplacianPyramid(base=imgs[-1], highs=highs)


def collapse(base, highs) -> np.ndarray:
    """Recursive upsample-and-add: ``a_K = base; a_k = u(a_{k+1}) + highs[k]``."""
    acc = as_image(base)
    for k in range(len(highs) - 1, -1, -1):
        band = as_image(highs[k])
        up = upsample(acc)
        if up.shape != band.shape:
            raise ShapeError(f"level {k}: upsampled {up.shape} does not match band {band.shape}")
        acc = up + band
    return acc


def reconstruct(pyr: LaplacianPyramid) -> np.ndarray:
    return collapse(pyr.base, pyr.highs)
