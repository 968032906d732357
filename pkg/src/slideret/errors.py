"""Error types shared across the package."""


class SlideretError(Exception):
    """Base class for all package-specific errors."""


class ManifestError(SlideretError):
    """Base class for manifest/stream ingestion failures."""


class MissingFileError(ManifestError):
    """A manifest or referenced feature binary does not exist."""


class DimensionMismatchError(ManifestError):
    """Binary header, payload size, or stream d_f disagree."""


class DuplicateSlideIdError(ManifestError):
    """The same slide_id appears more than once in a stream."""


class NonFiniteFeatureError(ManifestError):
    """A feature binary contains NaN or Inf values."""


class InvalidStreamError(SlideretError):
    """A task stream violates the class-incremental contract."""
