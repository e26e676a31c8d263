"""Exception types shared across the toolkit."""


class CarfitError(Exception):
    """Base class for all carfit errors."""


class NonPositiveDepth(CarfitError):
    """A point landed on or behind the camera plane (depth <= 0)."""


class TopologyMismatch(CarfitError):
    """Meshes that must share a canonical topology do not."""


class EmptyCluster(CarfitError):
    """K-means produced an empty cluster even after re-seeding."""


class DegenerateTriple(CarfitError):
    """Three points are (numerically) collinear; no unique plane exists."""


class TooFewKeypoints(CarfitError):
    """Not enough visible keypoints to attempt a pose fit."""


class SimplexViolation(CarfitError):
    """Cluster probabilities are not a valid probability simplex point."""
