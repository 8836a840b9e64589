"""Exception hierarchy shared by every module."""


class LgiError(Exception):
    """Base class for all library errors."""


class ShapeError(LgiError):
    """Operands have incompatible or invalid shapes."""


class ConfigError(LgiError):
    """A configuration value violates a documented invariant."""


class FormatError(LgiError):
    """A tensor or parameter file is malformed or truncated."""


class StateError(LgiError):
    """An operation was invoked in a state that does not support it."""


class NumericError(LgiError):
    """A computation produced a non-finite value."""


class ParseError(LgiError):
    """Config text is not valid JSON."""


class TrainError(LgiError):
    """Training diverged; carries the last finite state when available."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state
