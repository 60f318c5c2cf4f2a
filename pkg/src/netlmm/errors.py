"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ValidationError -> 1,
NumericalError -> 2, ConvergenceError -> 3.
"""


class NetlmmError(Exception):
    """Base class for all package errors."""


class ValidationError(NetlmmError):
    """Malformed or inconsistent input (files, shapes, domains)."""


class NumericalError(NetlmmError):
    """Singular or indefinite matrices, rank deficiency, likelihood descent."""


class ConvergenceError(NetlmmError):
    """An iterative solver exhausted its iteration budget."""
