"""Exception types raised across the toolkit."""


class SSIPError(Exception):
    """Base class for all toolkit errors."""


class DegenerateSignal(SSIPError, ValueError):
    pass


class FormatError(SSIPError, ValueError):
    pass


class IncompleteAudiogram(SSIPError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class UnknownScore(SSIPError, ValueError):
    pass


class InvalidCurve(SSIPError, ValueError):
    pass


class DuplicateId(SSIPError, ValueError):
    pass


class UnassignedListener(SSIPError, ValueError):
    pass


class InsufficientSamples(SSIPError, ValueError):
    pass


class ShapeError(SSIPError, ValueError):
    pass


class EmptySupport(SSIPError, ValueError):
    pass


class EmptyInput(SSIPError, ValueError):
    pass


class LeakageError(SSIPError, RuntimeError):
    pass


class DivergenceError(SSIPError, RuntimeError):
    pass


class BackboneError(SSIPError, RuntimeError):
    pass


class RangeError(SSIPError, IndexError):
    pass
