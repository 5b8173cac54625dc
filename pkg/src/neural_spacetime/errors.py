"""Exception types raised across the package."""


class NSTError(Exception):
    """Base class for all package errors."""


class CyclicInput(NSTError):
    pass


class NegativeWeight(NSTError):
    pass


class TooLarge(NSTError):
    pass


class UnknownMetric(NSTError, KeyError):
    pass


class ShapeMismatch(NSTError, ValueError):
    pass


class LengthMismatch(NSTError, ValueError):
    pass


class ConstraintViolation(NSTError, ValueError):
    """A parameter left its feasible set (e.g. an exponent below its floor)."""


class NonScalarLoss(NSTError, ValueError):
    pass


class DoubleBackward(NSTError, RuntimeError):
    pass


class NonPositiveLambda(ConstraintViolation):
    pass


class EmptyEdgeSet(NSTError, ValueError):
    pass


class TooFewTimeDims(NSTError, ValueError):
    pass


class NegativeInput(NSTError, ValueError):
    pass


class OffManifold(NSTError, ValueError):
    pass


class MalformedInput(NSTError, ValueError):
    """Input files could not be parsed into a graph or model."""
