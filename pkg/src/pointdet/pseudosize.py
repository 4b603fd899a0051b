"""Pseudo object sizes from point annotations under a locally-uniform layout.

Each point gets an initial size from the mean distance to its K nearest
neighbors, scaled by beta. That estimate is then smoothed by averaging the
initial sizes of every point inside a circular region around it; the member
count of that region ("crowdedness") doubles as a reliability signal and
feeds the per-object loss weight alpha. Skipping the smoothing step gives
the classic geometry-adaptive-kernel (GAK) baseline.
"""

from dataclasses import dataclass

import numpy as np

from .errors import IsolatedScene
from .geometry import SpatialIndex


@dataclass(frozen=True)
class LudaConfig:
    k: int = 2                  # neighbor count for the initial estimate
    beta: float = 1.0           # scale applied to neighbor distances
    rho: float = 2.0            # region radius = rho * initial size
    eta: float = 1.0            # crowdedness exponent for alpha
    alpha_cap: float = 50.0     # ceiling on alpha (gradient-explosion guard)
    gak_mode: bool = False      # skip smoothing; report crowdedness 1
    default_size_frac: float = 0.1  # fallback size for 1-point scenes,
                                    # as a fraction of min(image W, H)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not (self.beta > 0 and self.rho > 0):
            raise ValueError("beta and rho must be positive")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.alpha_cap < 1:
            raise ValueError("alpha_cap must be >= 1")


@dataclass
class PseudoBox:
    """A fabricated training box: annotated point + estimated size + belief."""

    x: float
    y: float
    size: float
    crowdedness: int
    alpha: float
    prior: float

    def as_box_array(self):
        return np.array([self.x, self.y, self.size], dtype=np.float64)


def initial_size(index: SpatialIndex, j: int, cfg: LudaConfig) -> float:
    """Mean distance to the K nearest neighbors of point ``j``, times beta.

    A scene with a single point has no neighbors and raises IsolatedScene;
    scenes with fewer than K neighbors fall back to every available one.
    """
    n = len(index)
    if n <= 1:
        raise IsolatedScene("cannot estimate a size from a single point")
    k = min(cfg.k, n - 1)
    d = index.knn_distances(index.points[j], k, exclude_self=True)
    return cfg.beta * float(np.mean(d))


def smoothed_size(index: SpatialIndex, all_initial: np.ndarray, j: int,
                  cfg: LudaConfig) -> tuple[float, int]:
    """Average the initial sizes over the circular region around point ``j``.

    Returns (size, crowdedness). The region always contains the point
    itself, so crowdedness >= 1. In gak_mode the initial size passes
    through untouched and crowdedness is reported as 1.
    """
    if cfg.gak_mode:
        return float(all_initial[j]), 1
    r = cfg.rho * float(all_initial[j])
    members = index.radius_members(index.points[j], r)
    return float(np.mean(np.asarray(all_initial)[members])), int(len(members))


def crowdedness_factor(crowdedness: int, cfg: LudaConfig) -> float:
    """Loss weight alpha = min(crowdedness ** eta, alpha_cap)."""
    if crowdedness < 1:
        raise ValueError("crowdedness must be >= 1")
    return float(min(float(crowdedness) ** cfg.eta, cfg.alpha_cap))


def generate_pseudo_boxes(points: np.ndarray, width: int, height: int,
                          cfg: LudaConfig, initial_prior: float = 0.6) -> list[PseudoBox]:
    """One PseudoBox per annotated point, deterministically.

    A single-point scene cannot support a neighbor-distance estimate; it
    falls back to ``default_size_frac * min(width, height)`` with
    crowdedness 1 (the least-trusted weight).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("scene has no points")
    if len(pts) == 1:
        fallback = cfg.default_size_frac * min(width, height)
        return [PseudoBox(pts[0, 0], pts[0, 1], fallback, 1, 1.0, initial_prior)]
    index = SpatialIndex(pts)
    d_init = np.array([initial_size(index, j, cfg) for j in range(len(pts))])
    out = []
    for j in range(len(pts)):
        s, crowd = smoothed_size(index, d_init, j, cfg)
        alpha = crowdedness_factor(crowd, cfg)
        out.append(PseudoBox(pts[j, 0], pts[j, 1], s, crowd, alpha, initial_prior))
    return out


def pseudo_boxes_for_scene(scene, cfg: LudaConfig,
                           initial_prior: float = 0.6) -> list[PseudoBox]:
    """generate_pseudo_boxes over anything with .points/.width/.height."""
    return generate_pseudo_boxes(scene.points, scene.width, scene.height,
                                 cfg, initial_prior)
