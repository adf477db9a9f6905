"""Exception hierarchy for the hetscale package."""

from __future__ import annotations


class HetscaleError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInput(HetscaleError):
    """An operation received structurally unusable input (e.g. an empty node list)."""


class DuplicateNode(InvalidInput):
    """The same node_id appears more than once in a cluster description."""


class InconsistentHierarchy(InvalidInput):
    """A switch id maps to more than one parent across node records."""


class InsufficientCapacity(HetscaleError):
    """A virtual assignment asked for more free GPUs than a node has."""


class InvalidShape(InvalidInput):
    """Trace generator parameters describe an impossible curve."""


class ParseError(HetscaleError):
    """A delimited input file could not be parsed.

    Carries the 1-based line number of the offending record.
    """

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class RangeError(ParseError):
    """A parsed field value is outside its allowed range."""

    def __init__(self, field: str, message: str, line: int):
        super().__init__(f"field {field!r}: {message}", line)
        self.field = field


class OutOfRange(HetscaleError):
    """A tick index falls outside the loaded trace."""


class InvalidConfig(HetscaleError):
    """A config value or combination of values is not usable."""


class GapInSchedule(InvalidConfig):
    """A periodic-policy schedule does not partition the 24-hour day."""


class NoFeasibleRatio(HetscaleError):
    """Every candidate P/D ratio violates an SLO at peak load."""


class AtomicPlacementFailed(HetscaleError):
    """Neither expansion nor creation can place both roles of a request."""


class ConfigError(HetscaleError):
    """A run config file is missing, unreadable, or fails validation."""
