"""Exception hierarchy shared across the package.

Each class maps onto one CLI exit code (see :mod:`asp_fscil.cli`).
"""


class ASPError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ASPError, ValueError):
    """Operand shapes do not conform."""


class NumericError(ASPError, ArithmeticError):
    """A non-finite value or a zero-norm vector was encountered."""


class ContractError(ASPError, RuntimeError):
    """A call violated an operation's precondition."""


class ConfigError(ASPError, ValueError):
    """Invalid or mutually incompatible configuration."""


class FormatError(ASPError, ValueError):
    """A binary file failed magic, version or length verification."""
