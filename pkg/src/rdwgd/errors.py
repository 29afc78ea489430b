"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``ConfigError`` -> 2, ``DataError`` -> 3,
``NumericError`` -> 4.
"""


class RDError(Exception):
    """Base class for all errors raised by rdwgd."""


class ConfigError(RDError, ValueError):
    """Invalid parameters or configuration."""


class DataError(RDError, ValueError):
    """Malformed, empty, or non-finite input data."""


class ShapeError(RDError, ValueError):
    """Array shapes or dimensions do not agree."""


class UnsupportedOperation(RDError, TypeError):
    """The requested operation is not defined for this distortion or mode."""


class NumericError(RDError, ArithmeticError):
    """A computation produced a non-finite or inconsistent value."""


class InvariantViolation(NumericError):
    """An internal invariant (e.g. BA monotonicity) was broken."""


class StalePotentialError(NumericError):
    """Sinkhorn potentials were used without having converged."""
