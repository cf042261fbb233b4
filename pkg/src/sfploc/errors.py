"""Exception types shared across the toolkit.

Plain ``ValueError`` is used for rejected inputs (shape/range violations);
the classes here mark failures that callers may want to catch selectively.
"""


class GeometryError(RuntimeError):
    """Base class for geometric failures."""


class DegenerateGeometryError(GeometryError):
    """Configuration does not constrain the solution (parallel rays, identical poses, ...)."""


class CheiralityError(GeometryError):
    """Reconstructed point lies behind a camera."""


class PoseEstimationError(GeometryError):
    """Robust pose estimation could not produce an acceptable hypothesis."""


class FormatError(RuntimeError):
    """Corrupt, truncated, or version-incompatible file content."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss.  Carries the loss trace up to the failure."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []
