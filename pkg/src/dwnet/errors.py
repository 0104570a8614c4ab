"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class DWNetError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ConfigurationError(DWNetError, ValueError):
    """Invalid parameter, flag or config value."""


class ShapeError(ConfigurationError):
    """Array shapes or channel counts are incompatible."""


class FormatError(DWNetError, ValueError):
    """Malformed image or checkpoint file."""


class UsageError(DWNetError, RuntimeError):
    """API misuse, e.g. a tape replayed against different parameters."""


class DegeneratePartitionError(DWNetError, ArithmeticError):
    """A Chan-Vese region is empty and no fallback was allowed."""

    exit_code = 3


class DivergenceError(DWNetError, ArithmeticError):
    """A non-finite value appeared in parameters or loss."""

    exit_code = 3
