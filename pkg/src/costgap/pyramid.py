"""Exact four-level image pyramid.

Averages are kept in fixed point, one unit = 1/4 of a pixel level, so the
2x2 pooling is an integer sum and nothing in here touches floating point.
All functions accept optional leading batch axes: ``(..., H, W, 3)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus_io import as_rgb
from .errors import DataError

LEVELS = 4
MAX_QUARTERS = 1020


def crop_to_multiple_of_8(img: np.ndarray) -> np.ndarray:
    """Center-crop to the largest multiple-of-8 size; offset is ``floor(remainder / 2)`` per axis."""
    img = as_rgb(img)
    h, w = img.shape[:2]
    if h < 8 or w < 8:
        raise DataError(f"image {w}x{h} is smaller than 8x8")
    top = (h % 8) // 2
    left = (w % 8) // 2
    return img[top:top + h - h % 8, left:left + w - w % 8]


def avgpool2x2(x: np.ndarray) -> np.ndarray:
    """2x2 block sums of an integer image, i.e. the average in quarter units."""
    x = np.asarray(x)
    h, w = x.shape[-3:-1]
    if h % 2 or w % 2:
        raise DataError(f"avgpool2x2 needs even dimensions, got {w}x{h}")
    x = x.astype(np.int32, copy=False)
    return (x[..., 0::2, 0::2, :] + x[..., 0::2, 1::2, :]
            + x[..., 1::2, 0::2, :] + x[..., 1::2, 1::2, :])


def round_quarter(y: np.ndarray) -> np.ndarray:
    """Round quarter values to the nearest integer level, halves upward."""
    y = np.asarray(y, dtype=np.int32)
    return ((y + 2) >> 2).astype(np.uint8)


def rounding_residual(y: np.ndarray) -> np.ndarray:
    """``y mod 4``: the 2-bit code that recovers ``y`` from ``round_quarter(y)``.

    Codes 0, 1, 2, 3 mean y - round(y) = 0, +1/4, -1/2, -1/4.
    """
    return (np.asarray(y, dtype=np.int32) & 3).astype(np.uint8)


def unround_quarter(x: np.ndarray, residual: np.ndarray) -> np.ndarray:
    """Inverse of (round_quarter, rounding_residual)."""
    r = np.asarray(residual, dtype=np.int32)
    return 4 * np.asarray(x, dtype=np.int32) + r - 4 * (r >= 2)


def fourth_pixel(y_quarters, p1, p2, p3, check: bool = True):
    """Bottom-right pixel of a 2x2 group from its block sum and the three others."""
    v = (np.asarray(y_quarters, dtype=np.int32) - np.asarray(p1, dtype=np.int32)
         - np.asarray(p2, dtype=np.int32) - np.asarray(p3, dtype=np.int32))
    if check and (np.any(v < 0) or np.any(v > 255)):
        raise DataError("fourth pixel out of [0, 255]: inconsistent group")
    if v.ndim == 0:
        return int(v)
    return v.astype(np.uint8)


@dataclass(frozen=True)
class Pyramid:
    """Integer levels ``x[0..3]`` and quarter-unit averages ``y[1..3]``.

    ``y[0]`` is ``None`` so that indices match level numbers.
    """
    x: tuple
    y: tuple

    @property
    def shape(self):
        return self.x[0].shape


def build_pyramid(img: np.ndarray) -> Pyramid:
    x0 = np.asarray(img)
    if x0.dtype != np.uint8 or x0.shape[-1] != 3:
        x0 = as_rgb(x0)
    h, w = x0.shape[-3:-1]
    if h % 8 or w % 8:
        raise DataError(f"pyramid needs dimensions divisible by 8, got {w}x{h}")
    xs = [x0]
    ys = [None]
    for _ in range(LEVELS - 1):
        y = avgpool2x2(xs[-1])
        ys.append(y)
        xs.append(round_quarter(y))
    return Pyramid(tuple(xs), tuple(ys))
