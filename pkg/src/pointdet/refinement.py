"""Confidence and order-aware refinement of stored pseudo boxes.

Every pseudo box carries a prior probability, initialized to one constant
(0.6 by default). After each forward pass the detector's predicted
confidence at a box's annotated center is its posterior; strictly larger
posteriors replace both the stored size and the prior. Priors therefore
ratchet upward, and boxes whose confidence grows fastest (easy, sparse
objects) get refined first.

Store file format (text, one record block per image):

    pointdet-pseudostore v1
    epoch <E>
    image <image_id> <M>
    <x> <y> <size> <prior> <crowdedness> <alpha> <last_update>
    ... M rows ...

Floats are written with repr() and round-trip exactly.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import MisalignedPredictions, ParseError
from .pseudosize import PseudoBox

STORE_MAGIC = "pointdet-pseudostore v1"

# Crowdedness intervals used for refinement statistics. The two middle
# edges are half-open so the four intervals partition [0, inf).
BUCKET_LABELS = ("[0,1]", "(1,4]", "(4,14)", "[14,inf)")
_BUCKET_UPPER = (1.0, 4.0, 14.0)


def bucket_of(crowdedness: float) -> int:
    if crowdedness <= 1:
        return 0
    if crowdedness <= 4:
        return 1
    if crowdedness < 14:
        return 2
    return 3


@dataclass
class ImageRecord:
    points: np.ndarray        # (M, 2), never mutated
    sizes: np.ndarray         # (M,)
    priors: np.ndarray        # (M,)
    crowdedness: np.ndarray   # (M,) int
    alphas: np.ndarray        # (M,)
    last_update: np.ndarray   # (M,) int epoch of last refinement, 0 = never


@dataclass
class PseudoBoxStore:
    images: dict[str, ImageRecord] = field(default_factory=dict)
    epoch: int = 0

    @classmethod
    def from_pseudo_boxes(cls, boxes_by_image: dict[str, list[PseudoBox]]) -> "PseudoBoxStore":
        store = cls()
        for image_id, boxes in boxes_by_image.items():
            store.images[image_id] = ImageRecord(
                points=np.array([[b.x, b.y] for b in boxes], dtype=np.float64),
                sizes=np.array([b.size for b in boxes], dtype=np.float64),
                priors=np.array([b.prior for b in boxes], dtype=np.float64),
                crowdedness=np.array([b.crowdedness for b in boxes], dtype=np.int64),
                alphas=np.array([b.alpha for b in boxes], dtype=np.float64),
                last_update=np.zeros(len(boxes), dtype=np.int64),
            )
        return store

    def n_boxes(self) -> int:
        return sum(len(r.sizes) for r in self.images.values())

    def init_priors(self, p0: float) -> None:
        """Reset every prior to the same starting constant."""
        if not (0.0 <= p0 <= 1.0):
            raise ValueError("prior must be a probability")
        for rec in self.images.values():
            rec.priors[:] = p0
            rec.last_update[:] = 0

    def refine(self, image_id: str, pred_sizes, posteriors,
               epoch: int | None = None) -> int:
        """Apply the update gate to one image; returns how many boxes changed.

        Predictions are aligned positionally with the stored boxes (the
        detector reads its size/confidence at each annotated center).
        A box updates iff its posterior strictly exceeds its prior.
        """
        rec = self.images[image_id]
        pred_sizes = np.asarray(pred_sizes, dtype=np.float64)
        posteriors = np.asarray(posteriors, dtype=np.float64)
        if pred_sizes.shape != rec.sizes.shape or posteriors.shape != rec.priors.shape:
            raise MisalignedPredictions(
                f"{image_id}: {len(pred_sizes)} predictions for {len(rec.sizes)} boxes")
        gate = posteriors > rec.priors
        rec.sizes[gate] = pred_sizes[gate]
        rec.priors[gate] = posteriors[gate]
        rec.last_update[gate] = self.epoch if epoch is None else epoch
        return int(gate.sum())

    def bucket_stats(self, threshold: float = 0.6) -> dict[str, float]:
        """Per-bucket fraction of boxes with prior > threshold.

        Buckets with no boxes at all are absent from the result rather
        than reported as zero.
        """
        totals = np.zeros(4, dtype=np.int64)
        above = np.zeros(4, dtype=np.int64)
        for rec in self.images.values():
            b = np.array([bucket_of(c) for c in rec.crowdedness])
            for i in range(4):
                sel = b == i
                totals[i] += sel.sum()
                above[i] += (rec.priors[sel] > threshold).sum()
        return {BUCKET_LABELS[i]: float(above[i] / totals[i])
                for i in range(4) if totals[i] > 0}

    def pseudo_boxes(self, image_id: str) -> list[PseudoBox]:
        rec = self.images[image_id]
        return [PseudoBox(rec.points[j, 0], rec.points[j, 1], rec.sizes[j],
                          int(rec.crowdedness[j]), rec.alphas[j], rec.priors[j])
                for j in range(len(rec.sizes))]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(STORE_MAGIC + "\n")
            f.write(f"epoch {self.epoch}\n")
            for image_id, rec in self.images.items():
                if any(ch.isspace() for ch in image_id):
                    raise ValueError(f"image_id may not contain whitespace: {image_id!r}")
                f.write(f"image {image_id} {len(rec.sizes)}\n")
                for j in range(len(rec.sizes)):
                    f.write(f"{rec.points[j, 0]!r} {rec.points[j, 1]!r} "
                            f"{rec.sizes[j]!r} {rec.priors[j]!r} "
                            f"{int(rec.crowdedness[j])} {rec.alphas[j]!r} "
                            f"{int(rec.last_update[j])}\n")

    @classmethod
    def load(cls, path) -> "PseudoBoxStore":
        store = cls()
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        if not lines or lines[0] != STORE_MAGIC:
            raise ParseError("not a pseudo-box store file", line=1)
        if len(lines) < 2 or not lines[1].startswith("epoch "):
            raise ParseError("missing epoch line", line=2)
        store.epoch = int(lines[1].split()[1])
        i = 2
        while i < len(lines):
            if not lines[i]:
                i += 1
                continue
            parts = lines[i].split()
            if parts[0] != "image" or len(parts) != 3:
                raise ParseError(f"expected 'image <id> <count>', got {lines[i]!r}",
                                 line=i + 1)
            image_id, m = parts[1], int(parts[2])
            if i + m >= len(lines):
                raise ParseError(f"truncated record for {image_id}", line=len(lines))
            rows = []
            for k in range(m):
                vals = lines[i + 1 + k].split()
                if len(vals) != 7:
                    raise ParseError("expected 7 fields per box", line=i + 2 + k)
                rows.append(vals)
            store.images[image_id] = ImageRecord(
                points=np.array([[float(r[0]), float(r[1])] for r in rows]).reshape(-1, 2),
                sizes=np.array([float(r[2]) for r in rows]),
                priors=np.array([float(r[3]) for r in rows]),
                crowdedness=np.array([int(r[4]) for r in rows], dtype=np.int64),
                alphas=np.array([float(r[5]) for r in rows]),
                last_update=np.array([int(r[6]) for r in rows], dtype=np.int64),
            )
            i += 1 + m
        return store
