"""Exception hierarchy for the toolkit.

Everything raised deliberately by this package derives from ``MognetError``
so callers (and the CLI) can map failure classes to exit codes without
fishing through numpy tracebacks.
"""


class MognetError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(MognetError):
    """A configuration value is missing, malformed, or out of range."""


class ShapeError(MognetError):
    """A tensor has the wrong rank, size, or incompatible dimensions."""


class DataError(MognetError):
    """A dataset file is missing, truncated, or malformed."""


class CheckpointError(MognetError):
    """A checkpoint file failed to parse or failed validation."""


class DegenerateDistributionError(MognetError):
    """A weight distribution collapsed so a step size cannot be derived."""


class EngineMismatchError(MognetError):
    """The integer engine and the real-valued engine disagreed."""
