"""Exception hierarchy shared by all sightline modules.

Every error raised by the library derives from SightlineError so callers
(CLI, service) can map failures to exit codes / HTTP status uniformly.
"""

from __future__ import annotations


class SightlineError(Exception):
    """Base class for all library errors."""


class OrderingError(SightlineError):
    """A timestamp violated the monotonicity required by its stream."""


class NoPoseError(SightlineError):
    """Pose lookup on an empty pose buffer."""


class StalePoseError(SightlineError):
    """No stored pose lies within the query tolerance."""


class FrameTooSmallError(SightlineError):
    """Requested crop exceeds the frame; upscaling is not supported."""


class ShapeError(SightlineError):
    """Array dims inconsistent with what the operation requires."""


class DataError(SightlineError):
    """Numerically invalid payload (NaN scores and the like)."""


class PlanError(SightlineError):
    """Tile plan cannot cover the region under the given constraints."""


class ModelLoadError(SightlineError):
    """Model file unreadable or not a valid serialized graph."""


class ConfigurationError(SightlineError):
    """Invalid or ambiguous run configuration."""


class UnsupportedModelError(SightlineError):
    """Model uses inputs or operators outside the backend's support."""


class InferenceError(SightlineError):
    """Backend failure while executing the model."""


class BackendUnavailableError(SightlineError):
    """Requested backend is not provided in this installation."""


class GeometryError(SightlineError):
    """Projection / unprojection failure (singular matrix, out of bounds)."""


class NoIntersectionError(GeometryError):
    """Ray does not hit the placement plane in front of the camera."""


class InsufficientDataError(SightlineError):
    """Not enough samples to compute the requested statistic or fit."""


class InfeasibleBudgetError(SightlineError):
    """No swept configuration fits inside the latency budget.

    Carries the fastest available row so callers can report how far off
    the budget is.
    """

    def __init__(self, message: str, fastest_row=None):
        super().__init__(message)
        self.fastest_row = fastest_row


class AnnotationParseError(SightlineError):
    """Annotation or detection file failed to parse; message says where."""
