"""Boxes, binary masks, IoU, run-length coding, and detection targets.

Boxes are continuous (x1, y1, x2, y2) in image-pixel units; masks are
dense bit grids. Rasterization uses pixel-center-inside semantics: pixel
(row r, col c) has its center at (c + 0.5, r + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"invalid box extents ({self.x1},{self.y1},{self.x2},{self.y2})")

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def contains(self, x, y):
        return self.x1 <= x <= self.x2 and self.y1 <= y <= self.y2


class BitMask:
    """Dense binary mask over an (height, width) pixel grid."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        arr = np.asarray(bits)
        if arr.ndim != 2:
            raise ValueError(f"BitMask expects a 2-d grid, got shape {arr.shape}")
        self.bits = arr.astype(bool)

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def area(self):
        return int(self.bits.sum())

    def __eq__(self, other):
        return isinstance(other, BitMask) and self.bits.shape == other.bits.shape \
            and bool(np.array_equal(self.bits, other.bits))

    def __repr__(self):
        return f"BitMask({self.height}x{self.width}, area={self.area})"

    def tight_box(self):
        """Tight bounding box of the set pixels (edges on pixel borders)."""
        rows = np.flatnonzero(self.bits.any(axis=1))
        cols = np.flatnonzero(self.bits.any(axis=0))
        if rows.size == 0:
            raise ValueError("tight_box of an empty mask")
        return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def box_iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def mask_iou(a: BitMask, b: BitMask) -> float:
    """|a AND b| / |a OR b|; two empty masks count as identical (1.0)."""
    if a.bits.shape != b.bits.shape:
        raise ValueError(f"mask extents differ: {a.bits.shape} vs {b.bits.shape}")
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 1.0
    return inter / union


def expand_box(b: Box, factor: float, image) -> Box:
    """Scale a box about its center by ``factor``, clipped to the image.

    ``image`` is (height, width).
    """
    if factor < 1.0:
        raise ValueError(f"expand factor must be >= 1, got {factor}")
    cx, cy = b.center
    hw = 0.5 * b.width * factor
    hh = 0.5 * b.height * factor
    h, w = image
    return Box(max(0.0, cx - hw), max(0.0, cy - hh),
               min(float(w), cx + hw), min(float(h), cy + hh))


def rle_encode(m: BitMask) -> list:
    """Column-major alternating run lengths, starting with the zero count."""
    flat = m.bits.flatten(order="F").astype(np.int8)
    if flat.size == 0:
        return [0]
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs, height, width) -> BitMask:
    total = sum(int(r) for r in runs)
    if total != height * width:
        raise ValueError(f"RLE runs sum to {total}, expected {height * width}")
    if any(int(r) < 0 for r in runs):
        raise ValueError("RLE runs must be nonnegative")
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    for i, r in enumerate(runs):
        r = int(r)
        if i % 2 == 1:
            flat[pos:pos + r] = True
        pos += r
    return BitMask(flat.reshape((height, width), order="F"))


def ltrb_targets(location, b: Box):
    """Distances from a location to the four box sides (l, t, r, b)."""
    x, y = location
    if not b.contains(x, y):
        raise ValueError(f"location {location} lies outside box "
                         f"({b.x1},{b.y1},{b.x2},{b.y2})")
    return (x - b.x1, y - b.y1, b.x2 - x, b.y2 - y)


def centerness_target(l, t, r, b) -> float:
    """sqrt((min(l,r)/max(l,r)) * (min(t,b)/max(t,b))), 0 on a box edge."""
    mx = max(l, r) * max(t, b)
    if mx <= 0.0:
        return 0.0
    return math.sqrt((min(l, r) * min(t, b)) / mx)


def rasterize_box(b: Box, height, width) -> BitMask:
    """Pixels whose centers fall inside the box (boundary inclusive)."""
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    inside = ((ys[:, None] >= b.y1) & (ys[:, None] <= b.y2) &
              (xs[None, :] >= b.x1) & (xs[None, :] <= b.x2))
    return BitMask(inside)
