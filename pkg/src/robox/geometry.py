"""Boxes, masks, overlap metrics, box perturbation and negative-point targets.

Coordinates follow image conventions: ``x`` is the column, ``y`` the row.
Boxes are stored canonically as ``(x1, y1, x2, y2)`` with inclusive pixel
extents when rasterised.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

POSITIVE = 1
NEGATIVE = 0

MAX_PERTURB_ATTEMPTS = 50


class EmptyTargetError(ValueError):
    """Raised when a mask has no foreground pixel."""


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def canonical(self) -> Box:
        return Box(min(self.x1, self.x2), min(self.y1, self.y2),
                   max(self.x1, self.x2), max(self.y1, self.y2))

    def clamp(self, height: int, width: int) -> Box:
        cx = lambda v: float(min(max(v, 0.0), width - 1))  # noqa: E731
        cy = lambda v: float(min(max(v, 0.0), height - 1))  # noqa: E731
        return Box(cx(self.x1), cy(self.y1), cx(self.x2), cy(self.y2))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> Box:
        a = [float(v) for v in a]
        return cls(a[0], a[1], a[2], a[3])


@dataclass(frozen=True)
class BoxOffsets:
    """Per-coordinate deltas, grouped as ``{dx1, dx2, dy1, dy2}``."""

    dx1: float
    dx2: float
    dy1: float
    dy2: float

    def __neg__(self) -> BoxOffsets:
        return BoxOffsets(-self.dx1, -self.dx2, -self.dy1, -self.dy2)

    def l1(self) -> float:
        return abs(self.dx1) + abs(self.dx2) + abs(self.dy1) + abs(self.dy2)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx1, self.dx2, self.dy1, self.dy2], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> BoxOffsets:
        a = [float(v) for v in a]
        return cls(a[0], a[1], a[2], a[3])


@dataclass(frozen=True)
class LabeledPoint:
    x: float
    y: float
    label: int = NEGATIVE


def as_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    return m.astype(bool)


def _round(v: float) -> int:
    return int(math.floor(v + 0.5))


def rasterize(box: Box, shape: tuple[int, int]) -> np.ndarray:
    """Pixel ``(r, c)`` is inside iff ``x1 <= c <= x2`` and ``y1 <= r <= y2`` after rounding."""
    h, w = shape
    b = box.canonical().clamp(h, w)
    out = np.zeros((h, w), dtype=bool)
    out[_round(b.y1): _round(b.y2) + 1, _round(b.x1): _round(b.x2) + 1] = True
    return out


def tight_box(mask) -> Box:
    m = as_mask(mask)
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise EmptyTargetError("tight_box: mask has no foreground pixels")
    return Box(float(cols[0]), float(rows[0]), float(cols[-1]), float(rows[-1]))


def iou(a: Box, b: Box) -> float:
    a, b = a.canonical(), b.canonical()
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 1.0 if a == b else 0.0
    return inter / union


def dice(a, b) -> float:
    """2|A∩B| / (|A|+|B|), with dice(∅, ∅) = 1."""
    a, b = as_mask(a), as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"dice: mask shapes differ {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def mask_iou(a, b) -> float:
    a, b = as_mask(a), as_mask(b)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def perturb_box_with_status(gt: Box, shift_range, rng: np.random.Generator,
                            image_shape: tuple[int, int] | None = None) -> tuple[Box, bool]:
    """Randomly shift each side of ``gt``; returns ``(box, fell_back)``.

    A draw is accepted only when its IoU with ``gt`` exceeds 0.5. After
    ``MAX_PERTURB_ATTEMPTS`` rejections the tight box itself is returned.
    """
    gt = gt.canonical()
    s_min, s_max = shift_range
    if not 0.0 <= s_min <= s_max:
        raise ValueError(f"invalid shift range {shift_range}")
    if gt.width <= 0 or gt.height <= 0:
        raise ValueError(f"perturb_box: degenerate box {gt}")
    if s_max == 0.0:
        return gt, False
    w, h = gt.width, gt.height
    side = np.array([w, h, w, h])
    base = gt.as_array()
    for _ in range(MAX_PERTURB_ATTEMPTS):
        s = rng.uniform(s_min, s_max)
        shift = rng.uniform(-s, s, size=4) * side
        cand = Box.from_array(base + shift).canonical()
        if image_shape is not None:
            cand = cand.clamp(*image_shape)
        if iou(cand, gt) > 0.5:
            return cand, False
    return gt, True


def perturb_box(gt: Box, shift_range, rng: np.random.Generator,
                image_shape: tuple[int, int] | None = None) -> Box:
    return perturb_box_with_status(gt, shift_range, rng, image_shape)[0]


def apply_offsets(p_c: Box, d: BoxOffsets, image_shape: tuple[int, int] | None = None) -> Box:
    out = Box(p_c.x1 + d.dx1, p_c.y1 + d.dy1, p_c.x2 + d.dx2, p_c.y2 + d.dy2).canonical()
    return out.clamp(*image_shape) if image_shape is not None else out


def negative_region(a: Box, b: Box, gt_mask) -> np.ndarray:
    """``(A ∪ B) − C`` for original box A, refined box B and target mask C."""
    c = as_mask(gt_mask)
    return (rasterize(a, c.shape) | rasterize(b, c.shape)) & ~c


def uniform_sample_points(region, n: int) -> tuple[list[tuple[int, int]], bool]:
    """Evenly spaced picks from the row-major pixel list of ``region``.

    Returns ``(points, skip)`` where points are ``(x, y)`` pairs and ``skip`` is
    set when the region is empty.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rows, cols = np.nonzero(as_mask(region))
    L = rows.size
    if L == 0:
        return [], True
    if L >= n:
        idx = [int((i + 0.5) * L / n) for i in range(n)]
    else:
        idx = [i % L for i in range(n)]
    return [(int(cols[i]), int(rows[i])) for i in idx], False


@lru_cache(maxsize=None)
def _permutations(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64).reshape(-1, n)


def match_points(pred, gt) -> tuple[tuple[int, ...], float]:
    """Exhaustive min-cost assignment of ``pred[i]`` to ``gt[perm[i]]``.

    Cost is the summed Euclidean distance; ties resolve to the
    lexicographically smallest permutation.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if len(pred) != len(gt):
        raise ValueError(f"match_points: {len(pred)} predictions vs {len(gt)} targets")
    n = len(pred)
    if n > 8:
        raise ValueError("match_points: brute force limited to n <= 8")
    if n == 0:
        return (), 0.0
    perms, costs = match_points_batch(pred[None], gt[None])
    return tuple(int(i) for i in perms[0]), float(costs[0])


def match_points_batch(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`match_points` over a leading batch axis."""
    n = pred.shape[1]
    dist = np.sqrt(((pred[:, :, None, :] - gt[:, None, :, :]) ** 2).sum(-1))  # (B, n, n)
    perms = _permutations(n)
    cost = np.zeros((pred.shape[0], len(perms)))
    for i in range(n):
        cost += dist[:, i, perms[:, i]]
    best = np.argmin(cost, axis=1)
    return perms[best], cost[np.arange(len(best)), best]
