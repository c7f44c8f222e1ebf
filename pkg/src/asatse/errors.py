"""Exception types shared across the package."""


class AsaTseError(Exception):
    """Base class for all package errors."""


class InvalidShapeError(AsaTseError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class InvalidArgumentError(AsaTseError, ValueError):
    """An argument is outside the domain of the operation."""


class NumericError(AsaTseError, ArithmeticError):
    """NaN or otherwise unusable numbers were encountered."""


class InvalidStateError(AsaTseError, RuntimeError):
    """The object is not in a state that allows the call."""
