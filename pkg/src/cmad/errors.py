"""Exception types shared across the package."""


class CmadError(Exception):
    """Base class for all package errors."""


class ShapeError(CmadError):
    """Operands have incompatible shapes."""


class NumericsError(CmadError):
    """A computation produced NaN or Inf."""


class StateError(CmadError):
    """An object was used out of its valid lifecycle (stale tape, missing gradients, ...)."""


class DeterminismError(CmadError):
    """Two forward passes of a supposedly deterministic function disagreed."""


class ParseError(CmadError):
    """Malformed chord label or annotation file content."""


class AnnotationError(CmadError):
    """Structurally invalid annotations (overlapping intervals, bad bounds)."""


class CapacityError(CmadError):
    """Sequence longer than the model's configured maximum."""


class AlignmentError(CmadError):
    """Token stream and condition stream lengths disagree."""


class CheckpointError(CmadError):
    """Checkpoint file is corrupt or does not match the model configuration."""


class ConfigError(CmadError):
    """Invalid or unknown configuration key/value."""
