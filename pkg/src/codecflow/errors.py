"""Exception types shared across the package."""


class CodecFlowError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CodecFlowError, ValueError):
    """Shapes, dimensions or config fields that do not fit together."""


class UsageError(CodecFlowError, ValueError):
    """A call made with arguments outside the operation's contract."""


class FormatError(CodecFlowError, ValueError):
    """Malformed or unsupported file content."""


class NumericDivergenceError(CodecFlowError, FloatingPointError):
    """A solver produced non-finite state."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step
