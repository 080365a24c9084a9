"""Exception types shared across the package."""


class TiclabError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TiclabError):
    """Operands with incompatible dimensions; the message names both."""


class ConfigError(TiclabError):
    """An invalid configuration value; the message names the field."""


class StreamError(TiclabError):
    """Bad task stream data (empty task, zero task size, label outside stream)."""


class FormatError(TiclabError):
    """A stream or state file that cannot be parsed.

    `offset` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateInputError(TiclabError):
    """A zero-norm vector was passed where a direction is required."""


class GradientError(TiclabError):
    """A gradient was requested for a tensor the graph does not differentiate."""
