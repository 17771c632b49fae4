"""Exception hierarchy shared by all snowseg modules.

The CLI maps these onto its exit-code contract: configuration/usage
problems exit 2, everything else that goes wrong at runtime exits 1.
"""


class SnowsegError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SnowsegError):
    """Tensor or label-map shapes do not fit the operation."""


class ConfigurationError(SnowsegError):
    """An illegal configuration value (bad sizes, unknown keys, ...)."""


class DataError(SnowsegError):
    """Input data violates its contract (bad class IDs, mismatched rasters)."""


class ParseError(DataError):
    """A text input (manifest, class table, palette) is malformed."""


class EvaluationError(SnowsegError):
    """An evaluation request cannot be answered (empty matrix, short log)."""


class TrainingError(SnowsegError):
    """Training diverged or hit an unrecoverable state mid-run."""
