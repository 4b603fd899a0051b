"""Points, square boxes, IoU, and a spatial index for kNN / radius queries.

Points are always ``[x, y]`` in continuous pixel coordinates. Boxes are
axis-aligned squares described by center and side length; maps elsewhere in
the package are indexed ``[row, col] == [y, x]``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import TooFewPoints


@dataclass(frozen=True)
class Box:
    """Square box: center (cx, cy), side length ``size``, optional score."""

    cx: float
    cy: float
    size: float
    score: float | None = None

    def __post_init__(self):
        if not (self.size > 0):
            raise ValueError(f"box size must be positive, got {self.size}")

    @property
    def corners(self):
        """(x0, y0, x1, y1) with x0 < x1, y0 < y1."""
        h = self.size / 2.0
        return (self.cx - h, self.cy - h, self.cx + h, self.cy + h)

    @property
    def area(self):
        return self.size * self.size


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; symmetric, in [0, 1]."""
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two box arrays of shape (N, 3) = [cx, cy, size]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    ah = a[:, 2:3] / 2.0
    bh = b[:, 2:3] / 2.0
    ax0, ay0, ax1, ay1 = a[:, 0:1] - ah, a[:, 1:2] - ah, a[:, 0:1] + ah, a[:, 1:2] + ah
    bx0, by0, bx1, by1 = b[:, 0:1] - bh, b[:, 1:2] - bh, b[:, 0:1] + bh, b[:, 1:2] + bh
    iw = np.minimum(ax1, bx1.T) - np.maximum(ax0, bx0.T)
    ih = np.minimum(ay1, by1.T) - np.maximum(ay0, by0.T)
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] ** 2)[:, None]
    area_b = (b[:, 2] ** 2)[None, :]
    return inter / (area_a + area_b - inter)


class SpatialIndex:
    """Immutable snapshot of a point set answering exact kNN / radius queries.

    Queries must agree with a brute-force scan of the indexed set; the tree
    is purely a speed device. Safe for concurrent reads once built.
    """

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"expected (N, 2) points, got shape {pts.shape}")
        self._points = pts.copy()
        self._points.setflags(write=False)
        self._tree = cKDTree(self._points, leafsize=16) if len(pts) else None

    def __len__(self):
        return len(self._points)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def knn_distances(self, query, k: int, exclude_self: bool = False) -> np.ndarray:
        """Distances to the ``k`` nearest indexed points, ascending.

        With ``exclude_self`` the query is assumed to be one of the indexed
        points and exactly one zero-distance candidate (the query itself) is
        dropped, so coincident duplicates still count as neighbors.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        n = len(self._points)
        available = n - (1 if exclude_self else 0)
        if available < k:
            raise TooFewPoints(f"need {k} neighbors, only {available} available")
        query = np.asarray(query, dtype=np.float64)
        if not exclude_self:
            d, _ = self._tree.query(query, k=k)
            return np.atleast_1d(d)
        # Ask for one extra so dropping self still leaves k candidates.
        d, _ = self._tree.query(query, k=min(k + 1, n))
        d = np.atleast_1d(d).copy()
        zero = np.flatnonzero(d == 0.0)
        if len(zero):
            d = np.delete(d, zero[0])
        return d[:k]

    def radius_members(self, center, r: float) -> np.ndarray:
        """Indices of all points with distance <= r from ``center``, sorted.

        When ``center`` is an indexed point the result includes it.
        """
        if not (r > 0):
            raise ValueError("radius must be positive")
        if self._tree is None:
            return np.empty(0, dtype=np.intp)
        out = self._tree.query_ball_point(np.asarray(center, dtype=np.float64), r)
        return np.sort(np.asarray(out, dtype=np.intp))
