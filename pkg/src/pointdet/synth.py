"""Synthetic crowd scenes with known (but hideable) ground-truth boxes.

Scenes realize the locally-uniform layout the pseudo-size generator
assumes: objects sit on jittered grids inside clusters, spacing roughly
constant per cluster, ground-truth size proportional to that spacing. A
configurable number of *scattered* objects are placed far from everything
with sizes drawn from the ordinary cluster-size range — their neighbor
distances wildly overestimate their true size, which is exactly the label
noise the self-training refinement is supposed to repair.

Images are simple renderings: one isotropic intensity bump of radius
size/2 per object (so appearance carries the size cue), plus additive
noise. On disk, annotations are JSON-lines records and images are binary
PGM (P5) files named ``<image_id>.pgm``:

    {"image_id": "scene00000", "width": 96, "height": 96,
     "points": [[x, y], ...], "boxes": [[cx, cy, size], ...]}

``boxes`` is optional; training must never read it.
"""

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import InfeasibleSpec, MissingImage, ParseError


@dataclass(frozen=True)
class SceneSpec:
    width: int = 96
    height: int = 96
    n_objects: tuple[int, int] = (16, 24)       # total, inclusive range
    n_clusters: tuple[int, int] = (2, 3)
    cluster_spacing: tuple[float, float] = (4.0, 14.0)
    spacing_jitter: float = 0.1                 # point jitter, fraction of spacing
    size_ratio: float = 1.0                     # gt size = spacing * ratio
    n_scattered: tuple[int, int] = (2, 5)       # isolated objects
    scattered_size: tuple[float, float] = (6.0, 12.0)
    scattered_min_dist: float = 24.0            # isolation distance, px
    noise_sigma: float = 0.05
    margin: int = 2                             # keep boxes clear of the border
    seed: int = 0

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("image too small")
        if self.size_ratio <= 0:
            raise ValueError("size_ratio must be positive")


@dataclass
class PointScene:
    image_id: str
    width: int
    height: int
    points: np.ndarray                 # (M, 2) [x, y]
    gt_boxes: np.ndarray | None = None  # (M, 3) [cx, cy, size]; hidden from training
    image: np.ndarray | None = None     # (H, W) float in [0, 1]

    def without_boxes(self) -> "PointScene":
        return PointScene(self.image_id, self.width, self.height,
                          self.points.copy(), None, self.image)

    @property
    def count(self) -> int:
        return len(self.points)


def _fits(x, y, size, spec: SceneSpec) -> bool:
    h = size / 2.0
    return (x - h >= spec.margin and y - h >= spec.margin
            and x + h <= spec.width - spec.margin
            and y + h <= spec.height - spec.margin)


def _min_dist(p, others) -> float:
    if len(others) == 0:
        return np.inf
    d = np.hypot(others[:, 0] - p[0], others[:, 1] - p[1])
    return float(d.min())


def generate_scene(spec: SceneSpec) -> PointScene:
    """Build one scene deterministically from spec.seed.

    Raises InfeasibleSpec when the requested object count cannot be placed
    at the requested spacings within the image.
    """
    rng = np.random.default_rng(spec.seed)
    n_total = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    n_scatter = int(rng.integers(spec.n_scattered[0], spec.n_scattered[1] + 1))
    n_scatter = min(n_scatter, max(n_total - 4, 0))
    n_cluster_pts = n_total - n_scatter
    n_clusters = int(rng.integers(spec.n_clusters[0], spec.n_clusters[1] + 1))
    n_clusters = min(n_clusters, n_cluster_pts)

    # split the cluster points roughly evenly
    counts = np.full(n_clusters, n_cluster_pts // n_clusters)
    counts[: n_cluster_pts % n_clusters] += 1

    points: list[list[float]] = []
    sizes: list[float] = []

    for count in counts:
        placed = False
        for _ in range(200):
            g = float(rng.uniform(*spec.cluster_spacing))
            size = g * spec.size_ratio
            m = int(np.ceil(np.sqrt(count)))
            extent = (m - 1) * g
            lo = spec.margin + size / 2.0 + spec.spacing_jitter * g
            hi_x = spec.width - lo - extent
            hi_y = spec.height - lo - extent
            if hi_x < lo or hi_y < lo:
                continue  # cluster too large for the image; redraw spacing
            ax = float(rng.uniform(lo, hi_x))
            ay = float(rng.uniform(lo, hi_y))
            cand = []
            ok = True
            cells = [(i, j) for i in range(m) for j in range(m)][:count]
            for i, j in cells:
                jx, jy = rng.uniform(-1.0, 1.0, 2) * spec.spacing_jitter * g
                x = round(ax + j * g + jx)
                y = round(ay + i * g + jy)
                if not _fits(x, y, size, spec):
                    ok = False
                    break
                if _min_dist((x, y), np.array(cand + points, dtype=np.float64).reshape(-1, 2)) <= max(1.0, 0.5 * g):
                    ok = False
                    break
                cand.append([float(x), float(y)])
            if ok:
                points.extend(cand)
                sizes.extend([size] * count)
                placed = True
                break
        if not placed:
            raise InfeasibleSpec(
                f"could not place a {count}-object cluster in {spec.width}x{spec.height}")

    for _ in range(n_scatter):
        placed = False
        for _ in range(500):
            size = float(rng.uniform(*spec.scattered_size))
            x = float(round(rng.uniform(spec.margin + size / 2, spec.width - spec.margin - size / 2)))
            y = float(round(rng.uniform(spec.margin + size / 2, spec.height - spec.margin - size / 2)))
            if _min_dist((x, y), np.array(points, dtype=np.float64).reshape(-1, 2)) >= spec.scattered_min_dist:
                points.append([x, y])
                sizes.append(size)
                placed = True
                break
        if not placed:
            raise InfeasibleSpec("could not place an isolated object far enough from the rest")

    pts = np.asarray(points, dtype=np.float64)
    szs = np.asarray(sizes, dtype=np.float64)
    boxes = np.column_stack([pts, szs])
    image = render_image(pts, szs, spec.height, spec.width,
                         noise_sigma=spec.noise_sigma, rng=rng)
    return PointScene(image_id=f"scene{spec.seed:08d}", width=spec.width,
                      height=spec.height, points=pts, gt_boxes=boxes, image=image)


def render_image(points, sizes, height: int, width: int,
                 noise_sigma: float = 0.05,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Grayscale rendering: per-object Gaussian bump truncated at size/2."""
    img = np.zeros((height, width), dtype=np.float64)
    yy, xx = np.mgrid[0:height, 0:width]
    for (x, y), s in zip(np.asarray(points).reshape(-1, 2), np.asarray(sizes).reshape(-1)):
        sb = max(s / 4.0, 0.75)
        reach = int(np.ceil(s / 2.0))
        r0, r1 = max(int(y) - reach, 0), min(int(y) + reach + 1, height)
        c0, c1 = max(int(x) - reach, 0), min(int(x) + reach + 1, width)
        d2 = (xx[r0:r1, c0:c1] - x) ** 2 + (yy[r0:r1, c0:c1] - y) ** 2
        bump = np.exp(-d2 / (2.0 * sb * sb))
        bump[d2 > (s / 2.0) ** 2] = 0.0
        np.maximum(img[r0:r1, c0:c1], bump, out=img[r0:r1, c0:c1])
    if noise_sigma > 0:
        rng = rng or np.random.default_rng(0)
        img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_dataset(spec: SceneSpec, n_scenes: int, seed: int = 0) -> list[PointScene]:
    """n_scenes independent scenes with derived per-scene seeds."""
    child = np.random.SeedSequence(seed).generate_state(n_scenes)
    scenes = []
    for i in range(n_scenes):
        s = generate_scene(replace(spec, seed=int(child[i])))
        s.image_id = f"scene{i:05d}"
        scenes.append(s)
    return scenes


def split_scenes(scenes, fractions=(0.8, 0.1, 0.1)):
    """Deterministic train/val/test split by position."""
    n = len(scenes)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return scenes[:n_train], scenes[n_train:n_train + n_val], scenes[n_train + n_val:]


# ----------------------------------------------------------------------
# file formats


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5), 8-bit, from a float image in [0, 1]."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise ParseError(f"{path}: not a binary PGM")
    # header: magic, width, height, maxval, then a single whitespace byte
    fields = []
    idx = 2
    while len(fields) < 3:
        while idx < len(data) and data[idx:idx + 1].isspace():
            idx += 1
        if data[idx:idx + 1] == b"#":
            while idx < len(data) and data[idx] != 0x0A:
                idx += 1
            continue
        start = idx
        while idx < len(data) and not data[idx:idx + 1].isspace():
            idx += 1
        fields.append(int(data[start:idx]))
    idx += 1  # the single whitespace after maxval
    w, h, maxval = fields
    arr = np.frombuffer(data[idx:idx + w * h], dtype=np.uint8).reshape(h, w)
    return arr.astype(np.float64) / float(maxval)


def save_annotations(path, scenes, images_dir=None) -> None:
    """JSON-lines annotation file; optionally writes PGM images next to it.

    Scenes without gt_boxes produce records without a "boxes" field, which
    is the true point-only supervision regime.
    """
    if images_dir is not None:
        os.makedirs(images_dir, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for s in scenes:
            rec = {"image_id": s.image_id, "width": s.width, "height": s.height,
                   "points": np.asarray(s.points, dtype=np.float64).tolist()}
            if s.gt_boxes is not None:
                rec["boxes"] = np.asarray(s.gt_boxes, dtype=np.float64).tolist()
            f.write(json.dumps(rec, sort_keys=True) + "\n")
            if images_dir is not None and s.image is not None:
                write_pgm(os.path.join(images_dir, f"{s.image_id}.pgm"), s.image)


def load_annotations(path, images_dir=None, load_images=False) -> list[PointScene]:
    """Parse a JSON-lines annotation file back into scenes.

    Raises ParseError with the 1-based line number on malformed records and
    MissingImage when load_images is set but a referenced PGM is absent.
    """
    scenes = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                image_id = rec["image_id"]
                width, height = int(rec["width"]), int(rec["height"])
                points = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 2)
                boxes = None
                if "boxes" in rec:
                    boxes = np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 3)
            except (KeyError, ValueError, TypeError, json.JSONDecodeError) as e:
                raise ParseError(str(e), line=lineno) from e
            image = None
            if load_images:
                if images_dir is None:
                    raise MissingImage("load_images requires images_dir")
                img_path = os.path.join(images_dir, f"{image_id}.pgm")
                if not os.path.exists(img_path):
                    raise MissingImage(img_path)
                image = read_pgm(img_path)
            scenes.append(PointScene(image_id, width, height, points, boxes, image))
    return scenes
