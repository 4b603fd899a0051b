"""Turn predicted maps into scored boxes.

Peaks are heatmap cells that equal the maximum of their 3x3 neighborhood
(clipped at borders) and clear the confidence threshold; plateau ties all
survive and are left for NMS to resolve. Each peak looks up its size from
the log-size map and, when present, its sub-stride offset. Multi-scale
testing rescales per-scale detections back to original pixels, pools them,
and runs one global NMS.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from .errors import NonFiniteSize
from .geometry import Box, iou_matrix


@dataclass(frozen=True)
class DecodeConfig:
    peak_window: int = 3
    confidence_threshold: float = 0.4   # also the default counting threshold
    nms_iou: float = 0.3
    scales: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        if not (0.0 < self.confidence_threshold < 1.0):
            raise ValueError("confidence_threshold must be in (0, 1)")
        if not (0.0 < self.nms_iou < 1.0):
            raise ValueError("nms_iou must be in (0, 1)")
        if any(s <= 0 for s in self.scales):
            raise ValueError("scales must be positive")


def extract_peaks(heatmap: np.ndarray, threshold: float = 0.4,
                  window: int = 3) -> list[tuple[tuple[int, int], float]]:
    """[( (row, col), score ), ...] for local maxima above the threshold.

    A cell is a peak iff it equals the max of its window-sized neighborhood
    (border neighborhoods are clipped to the map) and its value is >= the
    threshold. On constant plateaus every cell qualifies.
    """
    heat = np.asarray(heatmap, dtype=np.float64)
    filt = maximum_filter(heat, size=window, mode="nearest")
    mask = (heat >= threshold) & (heat == filt)
    return [((int(r), int(c)), float(heat[r, c])) for r, c in np.argwhere(mask)]


def decode_detections(peaks, size_map: np.ndarray,
                      offset_map: np.ndarray | None = None,
                      stride: int = 1) -> list[Box]:
    """Boxes from peak cells: center = stride * (cell + offset), size = exp(S)."""
    size_map = np.asarray(size_map, dtype=np.float64)
    out = []
    for (r, c), score in peaks:
        size = float(np.exp(size_map[r, c]))
        if not np.isfinite(size) or size <= 0:
            raise NonFiniteSize(f"cell ({r}, {c}) decodes to size {size}")
        x, y = float(stride * c), float(stride * r)
        if offset_map is not None:
            x += stride * float(offset_map[0, r, c])
            y += stride * float(offset_map[1, r, c])
        out.append(Box(x, y, size, score))
    return out


def nms(detections: list[Box], iou_threshold: float = 0.3) -> list[Box]:
    """Greedy suppression: keep by descending score, drop IoU > threshold.

    Score ties keep input order, so the result is deterministic.
    """
    if not detections:
        return []
    boxes = np.array([[b.cx, b.cy, b.size] for b in detections])
    scores = np.array([b.score for b in detections], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    ious = iou_matrix(boxes, boxes)
    keep = []
    suppressed = np.zeros(len(detections), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] > iou_threshold
    return [detections[i] for i in keep]


def multiscale_merge(per_scale_detections, scales,
                     nms_iou: float = 0.3) -> list[Box]:
    """Map per-scale detections back to original pixels, pool, then NMS."""
    pooled = []
    for dets, s in zip(per_scale_detections, scales):
        for b in dets:
            pooled.append(Box(b.cx / s, b.cy / s, b.size / s, b.score))
    return nms(pooled, nms_iou)


def count_from_detections(detections, threshold: float) -> int:
    """Number of detections at or above the confidence threshold."""
    return int(sum(1 for b in detections if b.score >= threshold))
