"""Exception hierarchy shared by every ddrid module."""


class DDRIDError(Exception):
    """Base class for all errors raised by ddrid."""


class FormatError(DDRIDError, ValueError):
    """A binary input file does not follow its declared format."""


class ConsistencyError(DDRIDError, ValueError):
    """Two inputs that must agree (e.g. image and label files) do not."""


class DataIOError(DDRIDError, OSError):
    """An input file is missing, unreadable or truncated."""


class ShapeError(DDRIDError, ValueError):
    """An array does not have the shape an operation requires."""


class ArgumentError(DDRIDError, ValueError):
    """An argument value is outside the operation's domain."""


class NumericError(DDRIDError, ArithmeticError):
    """A non-finite value appeared in activations or losses."""


class StateError(DDRIDError, RuntimeError):
    """An operation was called before its prerequisite state exists."""


class CheckpointError(DDRIDError):
    """A checkpoint file is corrupt or does not match the expected network."""


class ConfigError(DDRIDError, ValueError):
    """A run configuration field is missing, unknown or invalid."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DegenerateInputError(DDRIDError, ValueError):
    """Input lacks the variety an operation needs (e.g. only one label class)."""


def add_note(exc: BaseException, note: str) -> None:
    """``BaseException.add_note`` with a fallback for Python 3.10."""
    if hasattr(exc, "add_note"):
        exc.add_note(note)
    else:
        exc.__notes__ = [*getattr(exc, "__notes__", []), note]
