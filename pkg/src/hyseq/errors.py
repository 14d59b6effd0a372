"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Shapes or extents are incompatible."""


class SizeError(ValueError):
    """An input is larger than an operation allows."""


class StateError(RuntimeError):
    """An object is in the wrong state for the requested call."""


class CapacityError(ValueError):
    """A prompt or sequence does not fit in the model context."""


class FormatError(ValueError):
    """Malformed file contents (FASTA, checkpoint, config)."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class DataError(ValueError):
    """Dataset contents do not satisfy the caller's requirements."""


class DomainError(ValueError):
    """A value lies outside the domain an operation is defined on."""


class NumericalError(RuntimeError):
    """A loss or parameter became non-finite during training."""
