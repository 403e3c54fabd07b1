"""Exception types shared across the package."""


class D3QNError(Exception):
    """Base class for all package errors."""


class SchemaError(D3QNError, ValueError):
    """A world or config document could not be parsed."""


class WorldError(D3QNError, ValueError):
    """World geometry violates an invariant, or no free spawn pose exists."""


class UsageError(D3QNError, RuntimeError):
    """An API was called out of order or with invalid arguments."""


class ConfigError(D3QNError, ValueError):
    """Network or run configuration is inconsistent."""


class TrainingError(D3QNError, FloatingPointError):
    """Training produced a non-finite value."""


class CheckpointError(D3QNError, IOError):
    """A checkpoint file is missing, corrupt, or incompatible."""
