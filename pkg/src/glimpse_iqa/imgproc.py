"""Image preprocessing and multi-scale foveal glimpse extraction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class GlimpseStack:
    """Three same-size patches around one fixation, finest scale first."""

    patches: np.ndarray  # (3, out, out)
    scales: tuple[int, ...]

    @property
    def size(self) -> int:
        return self.patches.shape[-1]


def to_grayscale(rgb) -> np.ndarray:
    """8-bit RGB (or gray) array -> float luminance in [0, 1]."""
    arr = np.asarray(rgb)
    if arr.size == 0:
        raise ValueError("empty image")
    arr = arr.astype(np.float64)
    if arr.ndim == 3:
        if arr.shape[2] == 4:
            arr = arr[..., :3]
        if arr.shape[2] != 3:
            raise ValueError(f"expected 3 colour channels, got {arr.shape[2]}")
        arr = arr @ np.asarray(LUMA_WEIGHTS)
    elif arr.ndim != 2:
        raise ValueError(f"expected an HxW or HxWx3 image, got shape {arr.shape}")
    return arr / 255.0


def local_contrast_normalize(img, window: int = 7, eps: float = 1e-4) -> np.ndarray:
    """Divisive normalization by the local mean and standard deviation.

    Statistics are taken over the ``window x window`` neighbourhood;
    neighbours falling outside the image are zero-padded out of both the sums
    and the pixel count, so border windows average only real pixels.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise ValueError("expected a non-empty 2-d image")
    # the transform is shift invariant; centring on one pixel makes flat images exactly 0
    x = x - x.flat[0]
    box = lambda a: ndimage.uniform_filter(a, size=window, mode="constant", cval=0.0)
    count = box(np.ones_like(x))
    mean = box(x) / count
    var = np.maximum(box(x * x) / count - mean * mean, 0.0)
    return (x - mean) / (np.sqrt(var) + eps)


def preprocess(img, window: int = 7, eps: float = 1e-4) -> np.ndarray:
    """Grayscale (if needed) then local contrast normalization."""
    arr = np.asarray(img)
    gray = to_grayscale(arr) if arr.ndim == 3 or arr.dtype == np.uint8 else arr.astype(np.float64)
    return local_contrast_normalize(gray, window, eps)


def loc_to_pixel(loc, h: int, w: int) -> tuple[float, float]:
    """Normalized ``(lx, ly)`` in [-1, 1]^2 -> continuous ``(row, col)``."""
    lx, ly = np.clip(np.asarray(loc, dtype=np.float64), -1.0, 1.0)
    return (ly + 1.0) / 2.0 * (h - 1), (lx + 1.0) / 2.0 * (w - 1)


def pixel_to_loc(row: float, col: float, h: int, w: int) -> tuple[float, float]:
    """Inverse of :func:`loc_to_pixel`."""
    ly = 2.0 * row / (h - 1) - 1.0 if h > 1 else 0.0
    lx = 2.0 * col / (w - 1) - 1.0 if w > 1 else 0.0
    return lx, ly


def _check_scales(scales: Sequence[int], out: int) -> None:
    if len(scales) != 3 or any(b <= a for a, b in zip(scales, scales[1:])):
        raise ValueError(f"need three strictly increasing scales, got {scales}")
    for s in scales:
        if s % out:
            raise ValueError(f"scale {s} is not a multiple of the patch size {out}")


def _center_index(coord: float) -> int:
    # round half up so an s x s image's full-frame window starts at 0
    return int(np.floor(coord + 0.5))


def _patches(img: np.ndarray, row: float, col: float, scales, out: int) -> np.ndarray:
    h, w = img.shape
    r, c = _center_index(row), _center_index(col)
    result = np.empty((len(scales), out, out))
    for i, s in enumerate(scales):
        rows = np.clip(np.arange(r - s // 2, r - s // 2 + s), 0, h - 1)
        cols = np.clip(np.arange(c - s // 2, c - s // 2 + s), 0, w - 1)
        crop = img[np.ix_(rows, cols)]
        f = s // out
        result[i] = crop if f == 1 else crop.reshape(out, f, out, f).mean(axis=(1, 3))
    return result


def extract_glimpse(img, loc, scales: Sequence[int] = (32, 96, 288), out: int = 32) -> GlimpseStack:
    """Crop ``s x s`` windows around ``loc`` for each scale and block-average
    them down to ``out x out``. Pixels outside the image replicate the border.
    """
    scales = tuple(int(s) for s in scales)
    _check_scales(scales, out)
    img = np.asarray(img, dtype=np.float64)
    row, col = loc_to_pixel(loc, *img.shape)
    return GlimpseStack(_patches(img, row, col, scales, out), scales)


def extract_glimpse_batch(images: np.ndarray, locs: np.ndarray,
                          scales: Sequence[int], out: int) -> np.ndarray:
    """Batched :func:`extract_glimpse`: ``(B, H, W)``, ``(B, 2)`` -> ``(B, 3, out, out)``."""
    scales = tuple(int(s) for s in scales)
    _check_scales(scales, out)
    b, h, w = images.shape
    batch = np.empty((b, len(scales), out, out))
    for j in range(b):
        row, col = loc_to_pixel(locs[j], h, w)
        batch[j] = _patches(images[j], row, col, scales, out)
    return batch
