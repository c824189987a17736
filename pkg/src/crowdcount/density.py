"""Supervision signals derived from point annotations.

Point annotations (one (x, y) per head) are converted into the three
signals the rest of the pipeline trains on: density maps, binary
foreground masks, and per-image density-class labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

DENSITY_CLASS_NAMES = ("zero", "very-low", "low", "medium", "high", "very-high")

# Lowest threshold of 1 keeps the "zero" class exact: only count 0 falls below it.
DEFAULT_CLASS_BOUNDARIES = (1.0, 50.0, 150.0, 400.0, 800.0)

DEFAULT_SIGMA = 4.0
DEFAULT_SEG_THRESHOLD = 1e-3


@dataclass
class PointAnnotation:
    """Head locations of one image, in pixel coordinates (x right, y down)."""

    image_id: str
    width: int
    height: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)

    @property
    def count(self) -> int:
        return len(self.points)

    def validate(self) -> None:
        """Raise ValueError naming the first out-of-bounds point, if any."""
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"{self.image_id}: non-positive image size")
        x, y = self.points[:, 0], self.points[:, 1]
        bad = np.flatnonzero((x < 0) | (x >= self.width) | (y < 0) | (y >= self.height))
        if bad.size:
            i = int(bad[0])
            raise ValueError(
                f"{self.image_id}: point {i} at ({x[i]}, {y[i]}) outside "
                f"{self.width}x{self.height} image"
            )


@dataclass
class DensityMap:
    """Non-negative grid of persons-per-cell; entries sum to the count.

    ``scale`` is the downsampling factor relative to the source image
    (1 = full resolution, 4 = the network's output resolution).
    """

    values: np.ndarray
    scale: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("density map must be 2-D")
        if self.scale < 1:
            raise ValueError("scale must be a positive integer")

    @property
    def count(self) -> float:
        return float(self.values.sum())

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class SegmentationMask:
    """Binary foreground grid: 1 where the density map exceeds a threshold."""

    values: np.ndarray
    scale: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8)
        if self.values.ndim != 2:
            raise ValueError("segmentation mask must be 2-D")
        if not np.isin(self.values, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")


class DensityClass(NamedTuple):
    index: int
    label: str


@dataclass(frozen=True)
class ClassBoundaries:
    """Five strictly increasing count thresholds splitting [0, inf) into six classes.

    The first threshold must lie in (0, 1] so that the lowest class contains
    exactly count 0. A count equal to a threshold belongs to the higher class.
    """

    thresholds: tuple[float, ...] = DEFAULT_CLASS_BOUNDARIES

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        t = self.thresholds
        if len(t) != 5:
            raise ValueError("exactly 5 thresholds required")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("thresholds must be strictly increasing")
        if not 0.0 < t[0] <= 1.0:
            raise ValueError("first threshold must be in (0, 1] so class 0 is count 0 only")

    def intervals(self) -> list[tuple[float, float]]:
        """Half-open [lo, hi) count intervals of the six classes (last hi = inf)."""
        edges = (0.0, *self.thresholds, np.inf)
        return list(zip(edges[:-1], edges[1:]))


def _gaussian_kernel(cx: float, cy: float, sigma: float, height: int, width: int) -> tuple:
    """Unit-mass Gaussian bump centered at (cx, cy), truncated to the image.

    Evaluated on a (6*sigma+1)-sized window clipped to the grid, then
    renormalized so the clipped kernel sums to exactly 1. Returns the
    window slice and its values.
    """
    radius = int(np.ceil(3.0 * sigma))
    ix, iy = int(round(cx)), int(round(cy))
    x0, x1 = max(0, ix - radius), min(width, ix + radius + 1)
    y0, y1 = max(0, iy - radius), min(height, iy + radius + 1)
    ys = np.arange(y0, y1, dtype=np.float64)
    xs = np.arange(x0, x1, dtype=np.float64)
    g = np.exp(-((ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2) / (2.0 * sigma**2))
    g /= g.sum()
    return (slice(y0, y1), slice(x0, x1)), g


def generate_density_map(ann: PointAnnotation, sigma: float = DEFAULT_SIGMA) -> DensityMap:
    """Sum one unit-mass Gaussian per annotated point.

    Each kernel is truncated to the image and renormalized, so the map total
    equals the point count exactly (up to float accumulation) even for
    points near the border.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    ann.validate()
    values = np.zeros((ann.height, ann.width), dtype=np.float64)
    for x, y in ann.points:
        window, kernel = _gaussian_kernel(x, y, sigma, ann.height, ann.width)
        values[window] += kernel
    return DensityMap(values, scale=1)


def derive_segmentation_mask(
    dmap: DensityMap, threshold: float = DEFAULT_SEG_THRESHOLD
) -> SegmentationMask:
    """Mark cells with density strictly above ``threshold`` as foreground."""
    if threshold < 0:
        raise ValueError(f"threshold must be non-negative, got {threshold}")
    return SegmentationMask((dmap.values > threshold).astype(np.uint8), scale=dmap.scale)


def assign_density_class(count: float, boundaries: ClassBoundaries | None = None) -> DensityClass:
    """Map a person count to one of the six ordered density classes.

    A count equal to a threshold belongs to the higher class.
    """
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    b = boundaries or ClassBoundaries()
    index = int(np.searchsorted(b.thresholds, count, side="right"))
    return DensityClass(index, DENSITY_CLASS_NAMES[index])


def downsample_density_map(dmap: DensityMap, factor: int) -> DensityMap:
    """Sum-pool over factor x factor blocks, preserving the map total exactly.

    Dimensions not divisible by the factor are zero-padded bottom/right first.
    """
    if factor <= 0 or int(factor) != factor:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return DensityMap(dmap.values.copy(), scale=dmap.scale)
    h, w = dmap.values.shape
    ph = (-h) % factor
    pw = (-w) % factor
    values = dmap.values
    if ph or pw:
        values = np.pad(values, ((0, ph), (0, pw)))
    hh, ww = values.shape[0] // factor, values.shape[1] // factor
    pooled = values.reshape(hh, factor, ww, factor).sum(axis=(1, 3))
    return DensityMap(pooled, scale=dmap.scale * factor)


def boundaries_from_counts(counts: Sequence[float]) -> ClassBoundaries:
    """Recompute class boundaries from a dataset's count distribution.

    Keeps the exact zero class (first threshold 1) and spreads the remaining
    four thresholds over quantiles of the positive counts.
    """
    positive = np.sort(np.asarray([c for c in counts if c > 0], dtype=np.float64))
    if positive.size == 0:
        return ClassBoundaries()
    qs = np.quantile(positive, (0.2, 0.4, 0.6, 0.8))
    thresholds = [1.0]
    for q in qs:
        # Nudge forward past ties so thresholds stay strictly increasing.
        t = float(q)
        if t <= thresholds[-1]:
            t = thresholds[-1] + 1.0
        thresholds.append(t)
    return ClassBoundaries(tuple(thresholds))
