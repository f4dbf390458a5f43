"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`ThermometryError`; the subclasses name the contract that failed.
"""


class ThermometryError(Exception):
    """Base class for all package errors."""


# basis
class InvalidCoupling(ThermometryError, ValueError):
    pass


class NoConvergence(ThermometryError, RuntimeError):
    pass


class UnitarityViolation(ThermometryError, RuntimeError):
    pass


class BracketFailure(ThermometryError, RuntimeError):
    pass


class TruncationOverflow(ThermometryError, RuntimeError):
    pass


class ConvergenceFailure(ThermometryError, RuntimeError):
    pass


# levitov
class DimensionMismatch(ThermometryError, ValueError):
    pass


class GridTooCoarse(ThermometryError, ValueError):
    pass


class FockSpaceTooLarge(ThermometryError, ValueError):
    pass


class WindowTooWeak(ThermometryError, ValueError):
    pass


class NonConvergence(ThermometryError, RuntimeError):
    pass


class RecurrenceRegion(ThermometryError, ValueError):
    """Harmonic-trap times at or beyond the trap half-period."""


# weakcoupling
class PolylogDivergence(ThermometryError, RuntimeError):
    pass


class ValidityViolation(ThermometryError, ValueError):
    pass


# metrology
class BranchMisalignment(ThermometryError, RuntimeError):
    pass


class UndefinedAngle(ThermometryError, ValueError):
    pass


class DegenerateOutcome(ThermometryError, ValueError):
    pass


class ExtendGrid(ThermometryError, ValueError):
    pass


# protocol
class BoundaryMaximum(ThermometryError, RuntimeError):
    pass


# runner
class ConfigError(ThermometryError, ValueError):
    pass


class UnknownPreset(ThermometryError, KeyError):
    pass
