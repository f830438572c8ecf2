"""Exception types shared across the package."""


class WslocError(Exception):
    """Base class for all package errors."""


class ConfigError(WslocError, ValueError):
    """Shapes, dimensions or settings that cannot work together."""


class InputError(WslocError, ValueError):
    """Bad values passed to an otherwise well-configured operation."""


class FormatError(WslocError):
    """A dataset directory or checkpoint file does not follow the expected layout."""


class NumericalError(WslocError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class StateError(WslocError, RuntimeError):
    """An object was used before it was ready (e.g. an unloaded network)."""
