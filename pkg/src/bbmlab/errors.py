"""Exception types shared across the package."""


class BBMLabError(Exception):
    """Base class for package errors."""


class ConfigError(BBMLabError):
    """Invalid configuration or parameters."""


class CapacityError(BBMLabError):
    """A resource cap was hit; carries partial-progress information."""

    def __init__(self, message: str, *, nodes_built: int = 0, time_reached: float = 0.0):
        super().__init__(message)
        self.nodes_built = nodes_built
        self.time_reached = time_reached


class EmptyConfigurationError(BBMLabError):
    """All leaves were pruned; the barrier was too aggressive."""
