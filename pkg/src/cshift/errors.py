"""Exception hierarchy shared by every module."""


class CShiftError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(CShiftError, ValueError):
    pass


class FormatError(CShiftError):
    """A CSMAP/CSPRM file is malformed (bad magic, version, or truncated)."""


class InvalidMap(CShiftError, ValueError):
    """A map violates the finiteness / range / simplex invariants."""


class WriteError(CShiftError, OSError):
    pass


class ShapeError(CShiftError, ValueError):
    pass


class NumericsError(CShiftError, ArithmeticError):
    """Non-finite gradients or a diverging loss."""
