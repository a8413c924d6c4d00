"""Exception types shared across the package."""

from __future__ import annotations


class Scan2MapError(Exception):
    """Base class for every data/geometry error raised by scan2map."""


class InvalidArgumentError(Scan2MapError, ValueError):
    pass


class BranchAmbiguityError(Scan2MapError, ValueError):
    """Rotation angle too close to pi for a unique logarithm."""


class EmptyIndexError(Scan2MapError, ValueError):
    pass


class InsufficientPointsError(Scan2MapError, ValueError):
    pass


class DegenerateGeometryError(Scan2MapError, RuntimeError):
    """Registration or alignment problem is under-constrained."""


class EmptyMapError(Scan2MapError, ValueError):
    pass


class EmptyReferenceError(Scan2MapError, ValueError):
    pass


class UndefinedRatioError(Scan2MapError, ZeroDivisionError):
    pass


class EmptyInputError(Scan2MapError, ValueError):
    pass
