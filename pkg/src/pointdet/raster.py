"""Rasterize point annotations and sizes into training target maps.

The center heatmap holds a peak-normalized Gaussian per object (exactly 1 at
the object's center cell), overlaps resolved by element-wise max. The size
map stores log(size) at center cells only; an optional 2-channel offset map
stores the sub-stride fractional position at stride 4. All maps are indexed
[row, col]; points are [x, y] pixels.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import PointOutOfBounds


@dataclass(frozen=True)
class GaussianSpec:
    """Shape of the center-heatmap mask around each object.

    sigma = max(size / sigma_divisor, min_sigma) pixels, truncated at
    truncate_sigmas * sigma. With the defaults the 3-sigma support matches
    the box extent.
    """

    sigma_divisor: float = 6.0
    min_sigma: float = 1.0
    truncate_sigmas: float = 3.0

    def sigma_for(self, size: float) -> float:
        return max(size / self.sigma_divisor, self.min_sigma)


@dataclass
class SupervisionMaps:
    heatmap: np.ndarray                 # (H', W') in [0, 1]
    size_map: np.ndarray                # (H', W'), log(size) at centers
    pos_mask: np.ndarray                # (H', W') bool, object center cells
    offset_map: np.ndarray | None       # (2, H', W') in [0, 1), stride 4 only
    stride: int
    collisions: int = 0                 # centers that shared a cell
    center_cells: np.ndarray = field(default=None)  # (M, 2) [row, col] per object


def _center_cells(points: np.ndarray, h: int, w: int, stride: int) -> np.ndarray:
    """Map continuous [x, y] points to integer [row, col] grid cells."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) and (np.any(pts < 0) or np.any(pts[:, 0] >= w * stride)
                     or np.any(pts[:, 1] >= h * stride)):
        raise PointOutOfBounds(
            f"points must lie in [0, {w * stride}) x [0, {h * stride})")
    cols = np.floor(pts[:, 0] / stride).astype(np.intp)
    rows = np.floor(pts[:, 1] / stride).astype(np.intp)
    return np.stack([rows, cols], axis=1)


def render_center_heatmap(points, sizes, h: int, w: int,
                          spec: GaussianSpec = GaussianSpec(),
                          stride: int = 1):
    """Ground-truth center heatmap plus the positive-cell mask.

    Each object stamps exp(-d^2 / (2 sigma^2)) with d measured in pixels
    between cell centers; the stamp is 1 exactly at the object's own cell
    and is cut off beyond truncate_sigmas * sigma. Overlapping stamps keep
    the per-cell maximum, so coincident objects are idempotent.
    """
    cells = _center_cells(points, h, w, stride)
    sizes = np.asarray(sizes, dtype=np.float64).reshape(-1)
    heat = np.zeros((h, w), dtype=np.float64)
    pos = np.zeros((h, w), dtype=bool)
    for (r, c), s in zip(cells, sizes):
        sigma = spec.sigma_for(float(s))
        reach = int(np.ceil(spec.truncate_sigmas * sigma / stride))
        r0, r1 = max(r - reach, 0), min(r + reach + 1, h)
        c0, c1 = max(c - reach, 0), min(c + reach + 1, w)
        rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
        d2 = ((rr - r) ** 2 + (cc - c) ** 2) * float(stride) ** 2
        stamp = np.exp(-d2 / (2.0 * sigma * sigma))
        stamp[d2 > (spec.truncate_sigmas * sigma) ** 2] = 0.0
        np.maximum(heat[r0:r1, c0:c1], stamp, out=heat[r0:r1, c0:c1])
        pos[r, c] = True
    heat[pos] = 1.0
    return heat, pos


def render_size_map(points, sizes, h: int, w: int, stride: int = 1):
    """log(size) written at each object's center cell, zero elsewhere.

    Centers that land on an occupied cell overwrite it (last writer wins);
    the number of such collisions is returned so callers can log it.
    """
    cells = _center_cells(points, h, w, stride)
    sizes = np.asarray(sizes, dtype=np.float64).reshape(-1)
    if np.any(sizes <= 0):
        raise ValueError("sizes must be positive")
    size_map = np.zeros((h, w), dtype=np.float64)
    seen = np.zeros((h, w), dtype=bool)
    collisions = 0
    for (r, c), s in zip(cells, sizes):
        if seen[r, c]:
            collisions += 1
        seen[r, c] = True
        size_map[r, c] = np.log(s)
    return size_map, collisions


def render_offset_map(points, h: int, w: int, stride: int = 4):
    """Sub-stride offsets (x and y channels) at center cells.

    offset = coord / stride - floor(coord / stride), in [0, 1). Only
    meaningful when the output grid is coarser than the image.
    """
    cells = _center_cells(points, h, w, stride)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    off = np.zeros((2, h, w), dtype=np.float64)
    for (r, c), (x, y) in zip(cells, pts):
        off[0, r, c] = x / stride - np.floor(x / stride)
        off[1, r, c] = y / stride - np.floor(y / stride)
    return off


def render_supervision(points, sizes, height: int, width: int, stride: int = 1,
                       spec: GaussianSpec = GaussianSpec()) -> SupervisionMaps:
    """All target maps for one scene at the given stride.

    height/width are image pixels; the maps are (height//stride,
    width//stride). The offset map is rendered only at stride > 1.
    """
    h, w = height // stride, width // stride
    heat, pos = render_center_heatmap(points, sizes, h, w, spec, stride)
    size_map, collisions = render_size_map(points, sizes, h, w, stride)
    offset = render_offset_map(points, h, w, stride) if stride > 1 else None
    return SupervisionMaps(heatmap=heat, size_map=size_map, pos_mask=pos,
                           offset_map=offset, stride=stride,
                           collisions=collisions,
                           center_cells=_center_cells(points, h, w, stride))


def values_at_positives(grid: np.ndarray, pos_mask: np.ndarray) -> np.ndarray:
    """Row-major vector of ``grid`` values at positive cells.

    This fixes the ordering contract between per-object quantities and the
    losses: build a grid with scatter_to_grid, read it back with this.
    """
    return np.asarray(grid)[np.asarray(pos_mask, dtype=bool)]


def scatter_to_grid(values, center_cells, h: int, w: int,
                    fill: float = 0.0) -> np.ndarray:
    """Write per-object values at their center cells (last writer wins)."""
    grid = np.full((h, w), fill, dtype=np.float64)
    for (r, c), v in zip(np.asarray(center_cells), np.asarray(values, dtype=np.float64)):
        grid[r, c] = v
    return grid
