"""Exception hierarchy shared across the engine."""


class TidError(Exception):
    """Base class for all engine errors."""


class ConfigError(TidError, ValueError):
    """A configuration value violates its documented range."""


class ShapeMismatchError(TidError, ValueError):
    """Operands that must agree on shape do not."""
