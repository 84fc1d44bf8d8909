"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, PrerequisiteError -> 3,
NumericalError -> 4. Everything else is an ordinary crash.
"""


class OatdarError(Exception):
    """Base class for all toolkit errors."""


class GeometryError(OatdarError):
    """Invalid imaging geometry (bad counts, detectors inside the grid, ...)."""


class SignalWindowError(GeometryError):
    """The time window is too short to record the farthest pixel's arrival."""


class ShapeError(OatdarError):
    """An array does not match the shape implied by geometry or config."""


class ConfigError(OatdarError):
    """Malformed or inconsistent configuration (unknown keys, bad ranges)."""


class PrerequisiteError(OatdarError):
    """A pipeline stage was invoked before the stages it depends on."""


class NumericalError(OatdarError):
    """Divergence or non-finite values encountered during iteration/training."""


class TensorFileError(OatdarError):
    """Corrupt, truncated, or otherwise invalid on-disk tensor data."""
