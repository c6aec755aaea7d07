"""Grayscale conversion, histogram equalization, resizing and mask binarization.

Images are plain numpy arrays: a gray image is a 2-D ``uint8`` array of shape
``(height, width)``; a mask is a 2-D ``uint8`` array holding class indices.
"""
from __future__ import annotations

import numpy as np

from .errors import ImageFormatError, UsageError

LEVELS = 256
BT601 = (0.299, 0.587, 0.114)


def _as_gray(img) -> np.ndarray:
    a = np.asarray(img)
    if a.ndim != 2:
        raise ImageFormatError(f"expected a 2-D gray image, got shape {a.shape}")
    if a.dtype != np.uint8:
        if a.size and (a.min() < 0 or a.max() > 255 or not np.all(a == np.round(a))):
            raise ImageFormatError("gray image values must be integers in [0, 255]")
        a = a.astype(np.uint8)
    return a


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def to_grayscale(img) -> np.ndarray:
    """BT.601 luma, ``round(0.299 R + 0.587 G + 0.114 B)``.

    Accepts ``(H, W, 3)`` RGB, or an already gray ``(H, W)`` / ``(H, W, 1)``
    image which is returned unchanged.
    """
    a = np.asarray(img)
    if a.ndim == 2:
        return _as_gray(a).copy()
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ImageFormatError(f"expected 1 or 3 channels, got shape {a.shape}")
    if a.shape[2] == 1:
        return _as_gray(a[:, :, 0]).copy()
    rgb = a.astype(np.float64)
    y = rgb[..., 0] * BT601[0] + rgb[..., 1] * BT601[1] + rgb[..., 2] * BT601[2]
    return np.clip(_round_half_up(y), 0, 255).astype(np.uint8)


def compute_histogram(img) -> np.ndarray:
    """Count of pixels at each of the 256 gray levels."""
    return np.bincount(_as_gray(img).ravel(), minlength=LEVELS).astype(np.int64)


def compute_cdf(hist) -> np.ndarray:
    """Normalized cumulative histogram; ``cdf[255] == 1`` exactly."""
    counts = np.asarray(hist, dtype=np.int64)
    if counts.shape != (LEVELS,):
        raise UsageError(f"histogram must have {LEVELS} bins, got shape {counts.shape}")
    total = counts.sum()
    if total <= 0:
        raise UsageError("cannot build a CDF from an empty histogram")
    return np.cumsum(counts) / total


def build_lut(cdf) -> np.ndarray:
    """``lut[v] = round(255 * cdf[v])`` with halves rounded up."""
    cdf = np.asarray(cdf, dtype=np.float64)
    # cdf holds count/total; the nudge keeps exact halves from rounding down.
    # Safe while total < 5e8 pixels (distinct values differ by >= 1 / (2 total)).
    lut = _round_half_up(255.0 * cdf + 1e-9)
    return np.clip(lut, 0, 255).astype(np.uint8)


def equalize(img) -> np.ndarray:
    """Histogram-equalize a gray image through its own CDF lookup table."""
    gray = _as_gray(img)
    lut = build_lut(compute_cdf(compute_histogram(gray)))
    return lut[gray]


def resize_nearest(img, target_w: int, target_h: int) -> np.ndarray:
    """Nearest-neighbour resize; source row for output row ``i`` is ``i * H // target_h``."""
    if target_w <= 0 or target_h <= 0:
        raise UsageError(f"resize target must be positive, got {target_w}x{target_h}")
    a = np.asarray(img)
    h, w = a.shape[:2]
    if (h, w) == (target_h, target_w):
        return a.copy()
    rows = np.arange(target_h) * h // target_h
    cols = np.arange(target_w) * w // target_w
    return a[rows[:, None], cols[None, :]]


def binarize_mask(img, threshold: int = 128) -> np.ndarray:
    """1 where the pixel is ``>= threshold``, else 0."""
    return (np.asarray(img) >= threshold).astype(np.uint8)


def preprocess_image(img, size=None, equalize_first: bool = True) -> np.ndarray:
    """Gray conversion, equalization and optional square resize.

    By default the image is equalized at native resolution and resized
    afterwards; ``equalize_first=False`` swaps the two steps.
    """
    gray = to_grayscale(img)
    if size is None:
        return equalize(gray)
    if equalize_first:
        return resize_nearest(equalize(gray), size, size)
    return equalize(resize_nearest(gray, size, size))


def preprocess_mask(mask, size=None, threshold: int = 128) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim == 3:
        m = to_grayscale(m)
    if m.max(initial=0) > 1:
        m = binarize_mask(m, threshold)
    else:
        m = m.astype(np.uint8)
    return m if size is None else resize_nearest(m, size, size)


def to_network_input(images) -> np.ndarray:
    """Stack gray images ``(n, H, W)`` into a ``float32`` batch ``(n, 1, H, W)`` in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise UsageError(f"expected (n, H, W) images, got shape {arr.shape}")
    return (arr.astype(np.float32) / 255.0)[:, None]
