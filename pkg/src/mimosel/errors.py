"""Exception types shared across the package."""


class MimoselError(Exception):
    """Base class for all package errors."""


class DimensionError(MimoselError, ValueError):
    """Operand shapes do not conform to an operation's shape rule."""


class ContractError(MimoselError, ValueError):
    """An argument violates a documented precondition."""


class NumericalError(MimoselError, ArithmeticError):
    """A numeric procedure failed (non-finite values, failed factorization)."""


class StateError(MimoselError, RuntimeError):
    """An operation was invoked with missing or inconsistent mutable state."""


class FormatError(MimoselError, ValueError):
    """A serialized file is malformed. Carries the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigMismatchError(FormatError):
    """A stored configuration disagrees with the expected one."""


class DegenerateInputError(MimoselError, ValueError):
    """Input is degenerate (all-zero, rank-deficient) beyond what the operation supports."""


class SearchSpaceError(ContractError):
    """An enumeration was refused because the search space is too large."""
