"""Exception types raised across the engine."""


class ScopeNerfError(Exception):
    """Base class for all engine errors."""


# --- sparse model ingestion ---

class MissingFile(ScopeNerfError):
    """A required sparse-model file is absent."""


class MalformedRecord(ScopeNerfError):
    """A sparse-model file could not be decoded.

    Carries the byte offset (binary) or line number (text) of the failure.
    """

    def __init__(self, message, *, offset=None, line=None):
        loc = []
        if offset is not None:
            loc.append(f"byte offset {offset}")
        if line is not None:
            loc.append(f"line {line}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class UnsupportedCameraModel(ScopeNerfError):
    """Camera model id outside the supported set."""


class NonUnitQuaternion(ScopeNerfError):
    """Stored quaternion deviates from unit norm beyond repair."""


class EmptyPointCloud(ScopeNerfError):
    """Scene bounds requested for an empty point set."""


# --- dataset preparation ---

class BadCount(ScopeNerfError):
    pass


class BadFractions(ScopeNerfError):
    pass


class BadFactor(ScopeNerfError):
    pass


class BadRadius(ScopeNerfError):
    pass


class DimensionMismatch(ScopeNerfError):
    pass


class MissingFrameFile(ScopeNerfError):
    pass


class NoPoses(ScopeNerfError):
    """No registered image matched any frame on disk."""


# --- rays and sampling ---

class OutOfBounds(ScopeNerfError):
    """Pixel coordinate outside the image."""


class RayMissesBounds(ScopeNerfError):
    """Ray does not intersect the scene box; the pixel sees empty space."""


class EmptyTrainSet(ScopeNerfError):
    pass


# --- field and rendering ---

class OutOfUnitCube(ScopeNerfError):
    """Sample position outside [0,1]^3 after scene normalization."""


class NegativeDensity(ScopeNerfError):
    """Upstream contract violation: sigma < 0 reached the compositor."""


# --- training ---

class LengthMismatch(ScopeNerfError):
    pass


class DivergenceDetected(ScopeNerfError):
    """Loss became non-finite; training aborted.

    ``last_checkpoint`` holds the most recent good checkpoint path, if any.
    """

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class CorruptCheckpoint(ScopeNerfError):
    """Checkpoint container failed validation (magic/version/shape/truncation)."""

    def __init__(self, message, *, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


# --- metrics ---

class EmptyMask(ScopeNerfError):
    pass


class ImageTooSmall(ScopeNerfError):
    """Image smaller than the structural-similarity window."""
