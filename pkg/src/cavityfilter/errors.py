class CavityFilterError(Exception):
    """Base class for all package errors."""


class DimensionError(CavityFilterError):
    """Operator or state dimensions are inconsistent."""


class ConfigError(CavityFilterError):
    """Configuration text is malformed or violates an invariant."""


class InstabilityError(CavityFilterError):
    """A numerical state invariant was violated during integration."""


class RunFailure(CavityFilterError):
    """Too many trajectories of an ensemble run aborted."""
