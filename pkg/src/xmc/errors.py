"""Exception types shared across the package."""


class XmcError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(XmcError):
    """Operand shapes are incompatible; the message reports both shapes."""


class DegenerateInputError(XmcError):
    """Numerically degenerate input, e.g. a zero row fed to a normalizer."""


class UsageError(XmcError):
    """An API contract was violated by the caller."""


class ContractError(XmcError):
    """A runtime invariant the caller promised does not hold."""


class ConfigError(XmcError):
    """Invalid or inconsistent configuration values."""


class DomainError(XmcError):
    """Argument outside the mathematical domain of a function."""


class StratificationError(XmcError):
    """A label subsample cannot cover every class."""


class ResampleError(XmcError):
    """A sampled scene cannot be rendered; the caller should redraw it."""


class FormatError(XmcError):
    """A binary or text artifact does not match its expected layout."""


class NumericError(XmcError):
    """A non-finite value appeared where a finite one is required."""
