"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration problems exit with 2,
numerical failures with 3 and I/O or file-format failures with 4.
"""


class GanPriorError(Exception):
    """Base class for all package errors."""


class ConfigError(GanPriorError, ValueError):
    """Invalid configuration or precondition on user-supplied settings."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ContractError(GanPriorError, ValueError):
    """A call violated an operation's preconditions (shapes, emptiness)."""


class NumericError(GanPriorError, ArithmeticError):
    """A numerical procedure failed (non-finite value, no convergence)."""


class DomainError(NumericError):
    """A primitive was evaluated outside its mathematical domain."""


class NonFiniteError(NumericError):
    """A NaN or Inf appeared during evaluation."""


class FormatError(GanPriorError, IOError):
    """A binary file did not match its declared layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
