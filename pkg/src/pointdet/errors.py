"""Exception types shared across the package."""


class PointDetError(Exception):
    """Base class for all package errors."""


class TooFewPoints(PointDetError):
    """A kNN query asked for more neighbors than the index holds."""


class IsolatedScene(PointDetError):
    """Scene has a single annotation, so no neighbor distances exist."""


class PointOutOfBounds(PointDetError):
    """An annotation falls outside the image it belongs to."""


class NoPositives(PointDetError):
    """A loss was evaluated on a scene with zero positive cells."""


class MisalignedPredictions(PointDetError):
    """Refinement received a prediction count that differs from the box count."""


class NonFiniteSize(PointDetError):
    """Decoding produced a non-finite object size."""


class NoGroundTruth(PointDetError):
    """An evaluation protocol requires ground truth that is absent."""


class ZeroGroundTruthCount(PointDetError):
    """NAE is undefined for an image whose true count is zero."""


class InfeasibleSpec(PointDetError):
    """The scene spec cannot be satisfied (too many objects for the spacing)."""


class ParseError(PointDetError):
    """A data file is malformed; carries the offending line number."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class MissingImage(PointDetError):
    """An annotation record references an image file that does not exist."""


class ConfigError(PointDetError):
    """A run configuration is inconsistent or incomplete."""


class DivergedLoss(PointDetError):
    """Training produced a non-finite loss."""


class BadShape(PointDetError):
    """An input grid has a shape the detector cannot process."""


class ShapeMismatch(PointDetError):
    """Gradient/parameter shapes disagree."""


class StaleCache(PointDetError):
    """backward() was called with a cache from a different forward pass."""
