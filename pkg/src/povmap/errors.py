"""Exception taxonomy shared across the package."""


class PovmapError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(PovmapError, ValueError):
    """An argument is outside the documented domain of an operation."""


class ValidationError(PovmapError):
    """A loaded record violates a structural invariant.

    The message names the offending record and field.
    """


class DatasetError(PovmapError):
    """A dataset cannot be constructed from the provided bundle."""


class NumericError(PovmapError):
    """A numeric computation produced non-finite values."""


class StateError(PovmapError):
    """An object was used before being put into the required state."""


class ConfigError(PovmapError):
    """A run configuration is malformed or inconsistent."""


class UndefinedMetricError(PovmapError):
    """A metric is mathematically undefined for the given inputs."""
