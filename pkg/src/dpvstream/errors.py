"""Exception types raised across the package.

Every error derives from :class:`DPVError` so callers (notably the CLI) can
map whole families of failures onto exit codes.
"""


class DPVError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(DPVError, ValueError):
    """An argument violates a documented precondition."""


class BehindCameraError(InvalidArgumentError):
    """A point with non-positive depth was projected."""


class OutOfDomainError(InvalidArgumentError):
    """Input lies outside the domain where an operation is defined."""


class DegenerateWindowError(DPVError):
    """No frame of a window overlaps the reference view."""


class DegenerateProblemError(DPVError):
    """An optimization or statistic has no usable data."""


class NumericalFailureError(DPVError):
    """An iterative solver produced a non-finite value.

    Attributes:
        last_iterate: the last finite iterate, if any.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class DataError(DPVError):
    """Malformed or inconsistent input data (files, manifests)."""


class ParseError(DataError):
    """A line of a text file could not be parsed."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ConfigError(DPVError):
    """Invalid pipeline configuration."""
