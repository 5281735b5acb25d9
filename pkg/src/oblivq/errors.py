"""Exception types raised by the engine, planner and tooling."""


class OblivqError(Exception):
    """Base class for all errors raised by this package."""


class UnknownAttribute(OblivqError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DomainMismatch(OblivqError):
    pass


class OutOfBounds(OblivqError, IndexError):
    pass


class TmBudgetExceeded(OblivqError):
    pass


class SizeMismatch(OblivqError):
    pass


class StitchMismatch(OblivqError):
    pass


class NotPrefixHeavy(OblivqError):
    pass


class InternalScheduleError(OblivqError):
    pass


class PlanError(OblivqError):
    """A query template cannot be planned."""


class CyclicJoinError(PlanError):
    pass


class UnsupportedGrouping(PlanError):
    pass


class FkViolation(OblivqError):
    pass


class ParseError(OblivqError):
    pass


class GenerationTimeout(OblivqError):
    pass
