"""Exception types raised across the package."""


class ValidationError(ValueError):
    """Input data or configuration violates a documented constraint."""


class ParseError(ValidationError):
    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class ShapeError(ValueError):
    """Array dimensions do not match the operation's contract."""


class StateError(RuntimeError):
    """A required artifact (registry link, previous version, reference run) is missing."""


class VersionRangeError(IndexError):
    """A version index is outside the valid range."""


class NumericError(ArithmeticError):
    """Non-finite values appeared in a loss, gradient or metric."""


class DegenerateMetricError(ValueError):
    """The metric is undefined for the given labels (e.g. a single class)."""
