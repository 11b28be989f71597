"""Exception taxonomy shared across the package.

Every error raised by the library derives from :class:`CloudTrackError` so
callers (and the CLI) can map failures onto exit codes without string
matching.
"""


class CloudTrackError(Exception):
    """Base class for all library errors."""


class ConfigError(CloudTrackError):
    """Invalid or inconsistent configuration values."""


class ShapeError(CloudTrackError):
    """An array argument has the wrong shape or dtype."""


class FormatError(CloudTrackError):
    """On-disk data is malformed (manifest, tensor registry, header)."""


class IntegrityError(FormatError):
    """Stored checksum does not match tensor bytes."""


class CheckpointMismatchError(CloudTrackError):
    """Checkpoint architecture does not match the requested configuration."""


class DegenerateProjectionError(CloudTrackError):
    """Projection of a point with zero depth."""


class InvalidDepthError(CloudTrackError):
    """Nonpositive or nonfinite depth where a positive depth is required."""


class DegenerateScaleError(CloudTrackError):
    """Scale normalization sees fewer than two points or zero variance."""


class EmptyCloudError(CloudTrackError):
    """A frame/level has no valid cells to index or query."""


class EmptyWindowError(CloudTrackError):
    """A window contains no supervised or trackable points."""


class TokenAssemblyError(CloudTrackError):
    """Trajectory-token inputs disagree on shape or dtype."""


class DivergenceError(CloudTrackError):
    """NaN/Inf appeared in an iterative state update."""


class LossError(CloudTrackError):
    """Loss inputs are invalid (e.g. nonpositive supervision depth)."""


class UndefinedMetricError(CloudTrackError):
    """A metric has an empty denominator and no defined fallback."""
