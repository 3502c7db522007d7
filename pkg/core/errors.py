"""Exception types raised by rigidtrack."""

from typing import Optional


class RigidTrackError(Exception):
    """Base class for all rigidtrack failures."""


class ValidationError(RigidTrackError, ValueError):
    """An input breaks a type invariant or an operation precondition."""


class TrackParseError(ValidationError):
    """A tracks file could not be parsed."""

    def __init__(self, message: str, line_number: int, path: Optional[str] = None):
        self.line_number = line_number
        self.path = path
        where = f"{path}:{line_number}" if path else f"line {line_number}"
        super().__init__(f"{where}: {message}")


class ConfigError(ValidationError):
    """Bad configuration key or value."""


class ClusteringError(ValidationError):
    """Clustering request cannot be satisfied."""


class DegenerateGeometryError(RigidTrackError, ValueError):
    """A geometric estimate is underdetermined or degenerate."""


class SupervisionError(RigidTrackError):
    """No frame pair of a scene can be supervised."""


class NonFiniteError(RigidTrackError, ArithmeticError):
    """A loss or gradient went non-finite.

    Carries the name of the first offending parameter block and the flat
    index of the coordinate, and for fits the iteration it happened at.
    """

    def __init__(self, message: str, parameter: Optional[str] = None,
                 index: Optional[int] = None, iteration: Optional[int] = None):
        self.reason = message
        self.parameter = parameter
        self.index = index
        self.iteration = iteration
        details = []
        if iteration is not None:
            details.append(f"iteration {iteration}")
        if parameter is not None:
            details.append(f"parameter {parameter}")
        if index is not None:
            details.append(f"index {index}")
        suffix = f" ({', '.join(details)})" if details else ""
        super().__init__(f"{message}{suffix}")
