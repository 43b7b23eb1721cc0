"""Exception types shared across the package."""


class BlockwindError(Exception):
    """Base class for all package-specific errors."""


class FrameMismatch(BlockwindError):
    """Raised when composing or comparing poses whose frame tags do not chain."""


class BehindCamera(BlockwindError):
    """Raised when projecting a point at or behind the camera plane."""


class SphereIntersectsImagePlane(BlockwindError):
    """Raised when a sphere is not strictly in front of the camera."""


class EmptyBox(BlockwindError):
    """Raised for a degenerate (empty) bounding box."""


class ParseError(BlockwindError):
    """Raised on malformed input files; message carries line/offset context."""


class EmptyCloud(BlockwindError):
    """Raised when a point cloud has no points (after ingest or crop)."""


class DegenerateCloud(BlockwindError):
    """Raised when all cloud points coincide and no scale can be derived."""


class DegenerateAxes(BlockwindError):
    """Raised when manually recorded axes are too close to parallel."""


class NoObservationsEver(BlockwindError):
    """Raised when a block is never observed and cannot be inferred."""


class NoVisibleAnchor(BlockwindError):
    """Raised when an occluded block has no visible anchor at some frame."""

    def __init__(self, frame_index: int, message: str = ""):
        self.frame_index = frame_index
        super().__init__(message or f"no visible anchor at frame {frame_index}")


class EmptyCandidates(BlockwindError):
    """Raised when anchor selection is given no candidates."""


class PlacementFailure(BlockwindError):
    """Raised when random scene layout cannot place blocks without overlap."""


class FullyBlocked(BlockwindError):
    """Raised when voxelization leaves an inlet/outlet column entirely solid."""


class Diverged(BlockwindError):
    """Raised when the lattice-Boltzmann solver trips its stability guards."""


class OutOfDomain(BlockwindError):
    """Raised when probing the wind field outside the grid extent."""
