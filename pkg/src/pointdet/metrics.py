"""Evaluation protocols: detection AP, counting errors, localization.

Detection AP follows the score-ranked greedy protocol: detections are
ranked globally by score (ties keep input order), each claims the
highest-IoU unclaimed ground-truth box in its image, and counts as a true
positive iff that IoU strictly exceeds the threshold. AP is the area under
the monotone upper envelope of the precision-recall curve (all-points
interpolation).

Localization matching is a minimum-total-distance one-to-one assignment;
true positives need a matched distance strictly below the pixel threshold.
MLE averages matched-pair distances only. The box-radius protocol
(precision/recall/F1) accepts a prediction inside a per-object radius
sigma = sqrt(w^2 + h^2) / 2, matched greedily by descending score.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import NoGroundTruth, ZeroGroundTruthCount
from .geometry import iou_matrix


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]]   # (pred index, gt index, distance)
    unmatched_pred: list[int]
    unmatched_gt: list[int]


@dataclass
class MetricsReport:
    ap_by_iou: dict = field(default_factory=dict)     # iou threshold -> AP
    pr_curves: dict = field(default_factory=dict)     # iou threshold -> [(recall, precision)]
    mae: float | None = None
    rmse: float | None = None
    nae: float | None = None
    loc_ap: float | None = None
    mle: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    count_threshold: float | None = None
    n_images: int = 0

    def to_dict(self) -> dict:
        return {
            "ap_by_iou": {repr(k): v for k, v in self.ap_by_iou.items()},
            "mae": self.mae, "rmse": self.rmse, "nae": self.nae,
            "loc_ap": self.loc_ap, "mle": self.mle,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "count_threshold": self.count_threshold, "n_images": self.n_images,
        }

    def to_text(self) -> str:
        lines = [f"images evaluated: {self.n_images}"]
        for thr in sorted(self.ap_by_iou):
            lines.append(f"detection AP(IoU>{thr:g}): {self.ap_by_iou[thr]:.4f}")
        if self.mae is not None:
            lines.append(f"counting MAE: {self.mae:.4f}  RMSE: {self.rmse:.4f}"
                         f"  NAE: {self.nae:.4f} (threshold {self.count_threshold:g})")
        if self.loc_ap is not None:
            mle = "n/a" if self.mle is None else f"{self.mle:.4f}"
            lines.append(f"localization AP(20px): {self.loc_ap:.4f}  MLE: {mle}")
        if self.precision is not None:
            lines.append(f"precision: {self.precision:.4f}  recall: {self.recall:.4f}"
                         f"  F1: {self.f1:.4f}")
        return "\n".join(lines) + "\n"


def _as_box_array(boxes) -> np.ndarray:
    """Accept Box objects or (N, 3+) arrays; return (N, 3) [cx, cy, size]."""
    if len(boxes) == 0:
        return np.empty((0, 3))
    if hasattr(boxes[0], "cx"):
        return np.array([[b.cx, b.cy, b.size] for b in boxes], dtype=np.float64)
    return np.asarray(boxes, dtype=np.float64)[:, :3]


def _scores_of(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.empty(0)
    if hasattr(boxes[0], "score"):
        return np.array([b.score for b in boxes], dtype=np.float64)
    return np.asarray(boxes, dtype=np.float64)[:, 3]


def _envelope_ap(recalls: np.ndarray, precisions: np.ndarray) -> tuple[float, list]:
    """Area under the monotone precision envelope over recall."""
    curve = list(zip(recalls.tolist(), precisions.tolist()))
    mrec = np.concatenate([[0.0], recalls])
    mpre = np.concatenate([[0.0], precisions])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    ap = float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))
    return ap, curve


def detection_ap(detections_by_image, gts_by_image, iou_threshold: float):
    """(AP, pr_curve) for score-ranked detections against ground-truth boxes.

    Both arguments are per-image lists: detections carry scores (Box with
    score, or (N, 4) arrays [cx, cy, size, score]); ground truths are boxes
    without scores.
    """
    total_gt = sum(len(g) for g in gts_by_image)
    if total_gt == 0:
        raise NoGroundTruth("detection AP needs at least one ground-truth box")
    scores, img_of, det_arrays = [], [], []
    for i, dets in enumerate(detections_by_image):
        arr = _as_box_array(dets)
        det_arrays.append(arr)
        scores.extend(_scores_of(dets).tolist())
        img_of.extend([i] * len(arr))
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) == 0:
        return 0.0, []
    order = np.argsort(-scores, kind="stable")
    gt_arrays = [_as_box_array(g) for g in gts_by_image]
    ious = [iou_matrix(d, g) if len(d) and len(g) else np.zeros((len(d), len(g)))
            for d, g in zip(det_arrays, gt_arrays)]
    claimed = [np.zeros(len(g), dtype=bool) for g in gt_arrays]
    local_idx = np.concatenate([np.arange(len(a)) for a in det_arrays])

    tp = np.zeros(len(order), dtype=bool)
    for rank, flat in enumerate(order):
        img = img_of[flat]
        free = ~claimed[img]
        if not free.any():
            continue
        row = ious[img][local_idx[flat]]
        cand = np.where(free, row, -1.0)
        best = int(np.argmax(cand))
        if cand[best] > iou_threshold:
            claimed[img][best] = True
            tp[rank] = True
    tp_cum = np.cumsum(tp)
    ranks = np.arange(1, len(order) + 1)
    recalls = tp_cum / total_gt
    precisions = tp_cum / ranks
    return _envelope_ap(recalls, precisions)


def counting_errors(pred_counts, gt_counts):
    """(MAE, RMSE, NAE) over aligned per-image counts."""
    p = np.asarray(pred_counts, dtype=np.float64)
    g = np.asarray(gt_counts, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError("count sequences must align")
    err = np.abs(p - g)
    mae = float(err.mean())
    rmse = float(np.sqrt((err ** 2).mean()))
    if np.any(g == 0):
        raise ZeroGroundTruthCount("NAE undefined for zero-count images")
    nae = float((err / g).mean())
    return mae, rmse, nae


def localization_match(pred_points, gt_points) -> MatchResult:
    """Minimum-total-distance one-to-one assignment between point sets."""
    p = np.asarray(pred_points, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    if len(p) == 0 or len(g) == 0:
        return MatchResult([], list(range(len(p))), list(range(len(g))))
    d = np.hypot(p[:, 0:1] - g[None, :, 0], p[:, 1:2] - g[None, :, 1])
    rows, cols = linear_sum_assignment(d)
    pairs = [(int(r), int(c), float(d[r, c])) for r, c in zip(rows, cols)]
    unmatched_pred = sorted(set(range(len(p))) - {r for r, _, _ in pairs})
    unmatched_gt = sorted(set(range(len(g))) - {c for _, c, _ in pairs})
    return MatchResult(pairs, unmatched_pred, unmatched_gt)


def localization_ap_mle(matches_by_image, scores_by_image, gt_counts,
                        distance_threshold: float = 20.0):
    """(loc_AP, MLE) from per-image assignments and prediction scores.

    A prediction is a true positive iff its matched distance is strictly
    below the threshold; ranking is global by score. MLE averages the
    matched distances of every pair, matched-only, across the whole set.
    """
    total_gt = int(sum(gt_counts))
    scores, is_tp, all_dists = [], [], []
    for match, sc in zip(matches_by_image, scores_by_image):
        sc = np.asarray(sc, dtype=np.float64)
        dist_of = {r: d for r, _, d in match.pairs}
        all_dists.extend(dist_of.values())
        for i in range(len(sc)):
            scores.append(sc[i])
            is_tp.append(i in dist_of and dist_of[i] < distance_threshold)
    mle = float(np.mean(all_dists)) if all_dists else None
    if not scores or total_gt == 0:
        return 0.0, mle
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.asarray(is_tp, dtype=bool)[order]
    tp_cum = np.cumsum(tp)
    recalls = tp_cum / total_gt
    precisions = tp_cum / np.arange(1, len(tp) + 1)
    ap, _ = _envelope_ap(recalls, precisions)
    return ap, mle


def nwpu_prf(preds_by_image, gt_boxes_by_image):
    """(precision, recall, F1) under per-object acceptance radii.

    preds_by_image: per image (points (P, 2), scores (P,)). A prediction
    matches an unclaimed gt whose center is within sigma = sqrt(2)/2 * size
    (the box-diagonal radius); matching runs in descending score order and
    takes the nearest qualifying gt.
    """
    tp = 0
    n_pred = 0
    n_gt = 0
    for (pts, scores), gts in zip(preds_by_image, gt_boxes_by_image):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        scores = np.asarray(scores, dtype=np.float64)
        g = _as_box_array(gts)
        n_pred += len(pts)
        n_gt += len(g)
        if len(pts) == 0 or len(g) == 0:
            continue
        sigma = np.hypot(g[:, 2], g[:, 2]) / 2.0
        claimed = np.zeros(len(g), dtype=bool)
        for i in np.argsort(-scores, kind="stable"):
            d = np.hypot(g[:, 0] - pts[i, 0], g[:, 1] - pts[i, 1])
            ok = (~claimed) & (d <= sigma)
            if ok.any():
                d = np.where(ok, d, np.inf)
                claimed[int(np.argmin(d))] = True
                tp += 1
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt if n_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    return float(precision), float(recall), float(f1)


def threshold_search(scores_by_image, gt_counts, grid):
    """Threshold from ``grid`` minimizing counting MAE; ties pick the lowest."""
    grid = list(grid)
    if not grid:
        raise ValueError("threshold grid is empty")
    g = np.asarray(gt_counts, dtype=np.float64)
    best_t, best_mae = None, np.inf
    for t in sorted(grid):
        counts = np.array([float(np.sum(np.asarray(s) >= t)) for s in scores_by_image])
        mae = float(np.abs(counts - g).mean())
        if mae < best_mae:
            best_mae, best_t = mae, t
    return best_t
