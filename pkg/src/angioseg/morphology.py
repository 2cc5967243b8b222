"""Flat-rectangle grey morphology, binarization and connected components.

The background segmentation used to bootstrap labels is::

    black_top_hat(frame, 9x9) -> threshold(otsu) -> filter_small_components

Min/max filters replicate edge pixels at the border so that closing does not
darken the image frame.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class StructuringElement:
    width: int = 9
    height: int = 9

    def __post_init__(self):
        for v in (self.width, self.height):
            if v < 1 or v % 2 == 0:
                raise ValueError("structuring element sides must be odd and >= 1")

    @property
    def size(self) -> tuple[int, int]:
        return (self.height, self.width)


SE9 = StructuringElement(9, 9)
SE3 = StructuringElement(3, 3)


class ComponentStats(NamedTuple):
    label: int
    area: int
    bbox: tuple[int, int, int, int]  # (y0, x0, y1, x1), half-open


class ThresholdResult(NamedTuple):
    mask: np.ndarray
    threshold: float
    degenerate: bool


def erode(f, se: StructuringElement = SE9) -> np.ndarray:
    return ndimage.minimum_filter(np.asarray(f, dtype=np.float64), size=se.size, mode="nearest")


def dilate(f, se: StructuringElement = SE9) -> np.ndarray:
    return ndimage.maximum_filter(np.asarray(f, dtype=np.float64), size=se.size, mode="nearest")


def closing(f, se: StructuringElement = SE9) -> np.ndarray:
    return erode(dilate(f, se), se)


def black_top_hat(f, se: StructuringElement = SE9) -> np.ndarray:
    """Closing minus the image: positive on dark structures thinner than ``se``."""
    f = np.asarray(f, dtype=np.float64)
    # closing is extensive, the clip only removes rounding noise
    return np.maximum(closing(f, se) - f, 0.0)


def otsu_threshold(f, bins: int = 256) -> tuple[float, bool]:
    """Otsu threshold over a ``bins``-bin histogram of [0, 1].

    Returns ``(t, degenerate)``; pixels ``> t`` are foreground. Among
    thresholds with equal between-class variance the lowest one wins.
    """
    f = np.asarray(f, dtype=np.float64).ravel()
    if f.size == 0 or f.min() == f.max():
        return 1.0, True
    idx = np.clip((f * bins).astype(int), 0, bins - 1)
    hist = np.bincount(idx, minlength=bins).astype(np.float64)
    centers = (np.arange(bins) + 0.5) / bins
    total = hist.sum()
    w0 = np.cumsum(hist)
    s0 = np.cumsum(hist * centers)
    w1 = total - w0
    mu0 = np.divide(s0, w0, out=np.zeros(bins), where=w0 > 0)
    mu1 = np.divide(s0[-1] - s0, w1, out=np.zeros(bins), where=w1 > 0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    between[(w0 == 0) | (w1 == 0)] = -1.0
    k = int(np.argmax(between))  # first maximum = lowest threshold
    if between[k] <= 0:
        return 1.0, True
    # split between bin k and k+1: everything in bins <= k is background
    return (k + 1) / bins, False


def threshold(f, method="otsu") -> ThresholdResult:
    """Binarize ``f``. ``method`` is ``"otsu"`` or a float in [0, 1]."""
    f = np.asarray(f, dtype=np.float64)
    if isinstance(method, str):
        if method != "otsu":
            raise ValueError(f"unknown threshold method {method!r}")
        t, degenerate = otsu_threshold(f)
        if degenerate:
            return ThresholdResult(np.zeros(f.shape, dtype=bool), t, True)
        idx = np.clip((f * 256).astype(int), 0, 255)
        return ThresholdResult(idx >= round(t * 256), t, False)
    t = float(method)
    if not 0.0 <= t <= 1.0:
        raise ValueError("fixed threshold must lie in [0, 1]")
    return ThresholdResult(f > t, t, False)


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise ValueError("connectivity must be 4 or 8")


def connected_components(m, connectivity: int = 8) -> tuple[np.ndarray, list[ComponentStats]]:
    """Label foreground components, numbered 1.. in raster order of their first pixel."""
    m = np.asarray(m, dtype=bool)
    labels, n = ndimage.label(m, structure=_structure(connectivity))
    if n == 0:
        return labels, []
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    stats = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        stats.append(ComponentStats(k, int(areas[k]),
                                    (sl[0].start, sl[1].start, sl[0].stop, sl[1].stop)))
    return labels, stats


def filter_small_components(m, min_area: int, connectivity: int = 8) -> np.ndarray:
    """Drop components whose area is below ``min_area``."""
    if min_area < 0:
        raise ValueError("min_area must be >= 0")
    m = np.asarray(m, dtype=bool)
    if min_area == 0:
        return m.copy()
    labels, stats = connected_components(m, connectivity)
    keep = np.zeros(len(stats) + 1, dtype=bool)
    for s in stats:
        keep[s.label] = s.area >= min_area
    return keep[labels]


def default_min_area(shape, base: int = 50) -> int:
    """``base`` pixels at 256x256, scaled with image area."""
    h, w = shape
    return max(1, int(round(base * h * w / 256 ** 2)))


@dataclass(frozen=True)
class MorphologyConfig:
    se_size: int = 9
    threshold: str | float = "otsu"
    min_area: int | None = None  # None -> default_min_area(shape)
    connectivity: int = 8

    def resolved_min_area(self, shape) -> int:
        return default_min_area(shape) if self.min_area is None else int(self.min_area)


def background_segmentation(f, cfg: MorphologyConfig = MorphologyConfig(),
                            apply_cc: bool = True) -> np.ndarray:
    """Top-hat -> threshold -> (optional) small-component removal."""
    se = StructuringElement(cfg.se_size, cfg.se_size)
    mask = threshold(black_top_hat(f, se), cfg.threshold).mask
    if apply_cc:
        mask = filter_small_components(mask, cfg.resolved_min_area(mask.shape), cfg.connectivity)
    return mask
