"""Exception hierarchy shared across the package.

ValidationError covers anything a caller got wrong (shapes, configs,
preconditions); NumericError covers runtime numeric failures (non-finite
values, unusable data). The CLI maps these to exit codes 1 and 2.
"""


class GraphprintError(Exception):
    """Base class for all package errors."""


class ValidationError(GraphprintError, ValueError):
    """Invalid configuration, argument, or precondition."""


class ShapeError(ValidationError):
    """Array shapes incompatible with the requested operation."""


class DataError(ValidationError):
    """Input data violates a documented requirement (e.g. too few minutiae)."""


class NumericError(GraphprintError, RuntimeError):
    """Non-finite values or other numeric failures at runtime."""
