"""Exception types shared across the package."""


class UQDError(Exception):
    """Base class for package errors."""


class DimensionError(UQDError, ValueError):
    """Shapes or axes are incompatible."""


class ContractError(UQDError, ValueError):
    """A documented precondition was violated."""


class NumericError(UQDError, ArithmeticError):
    """A computation produced or would produce non-finite values."""


class FormatError(UQDError, ValueError):
    """A file does not conform to its format."""


class ConfigError(UQDError, ValueError):
    """Invalid or incomplete configuration."""
