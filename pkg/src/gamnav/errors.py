"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes (see ``gamnav.cli``).
"""


class GamError(Exception):
    """Base class for every error raised by gamnav."""


class ConfigError(GamError, ValueError):
    """Invalid configuration or argument value."""


class DimensionError(GamError, ValueError):
    """Array shapes do not line up."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class PreconditionError(GamError):
    """An operation was called before its inputs exist or are valid."""


class NumericalError(GamError, ArithmeticError):
    """Non-finite values appeared in a computation."""


class MazeError(GamError, ValueError):
    """Malformed or invalid maze description."""
