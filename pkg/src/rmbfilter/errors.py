"""Exception hierarchy shared by every module."""


class RMBError(Exception):
    """Base class for all library errors."""


class DomainError(RMBError, ValueError):
    """An argument lies outside the domain where an operation is defined."""


class NumericError(RMBError, ArithmeticError):
    """A computation underflowed, overflowed or produced a non-finite value."""


class UnsupportedOperationError(RMBError, TypeError):
    """The kernel does not provide the requested capability."""


class ConstructionError(RMBError, ValueError):
    """Invalid data passed to a constructor (priors, measures, kernels)."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConfigError(RMBError, ValueError):
    """Invalid experiment configuration; `field` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class QuadratureWarning(UserWarning):
    """A quadrature box does not cover the required probability mass."""
