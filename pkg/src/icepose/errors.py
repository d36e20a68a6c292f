"""Exception types raised across the package."""


class IcePoseError(Exception):
    """Base class for all package errors."""


class DimensionError(IcePoseError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(IcePoseError, ValueError):
    """A call violated an API precondition."""


class ConfigError(IcePoseError, ValueError):
    """Invalid or inconsistent configuration."""


class DegeneracyError(IcePoseError, ValueError):
    """Input is at a degenerate point (e.g. parallel rotation columns)."""


class FormatError(IcePoseError, ValueError):
    """On-disk data is corrupt or has an unexpected layout."""


class DivergenceError(IcePoseError, RuntimeError):
    """Training produced a non-finite loss."""


class NonFiniteError(IcePoseError, ValueError):
    """A tensor holds NaN or Inf where finite values are required."""
