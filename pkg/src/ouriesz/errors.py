"""Exception hierarchy shared by every module of the package."""

__all__ = [
    "ComplexEigenvalueUnsupported",
    "DegenerateSample",
    "EmptyMultiindex",
    "GridBudgetExceeded",
    "IoFailure",
    "LyapunovSolveFailed",
    "ModelError",
    "NearDiagonal",
    "NotHurwitz",
    "NotPositiveDefinite",
    "NotSymmetric",
    "OUError",
    "QuadratureBudgetExceeded",
    "QuadratureDivergence",
    "QuadratureNonconvergence",
    "RootBracketFailure",
    "SpectralRouteUnavailable",
    "SupportOverlap",
    "T0NotFound",
    "UnknownEstimate",
    "ZeroVector",
]


class OUError(Exception):
    """Base class for all errors raised by ``ouriesz``."""


class ModelError(OUError, ValueError):
    """The (Q, B) pair does not define an admissible Ornstein-Uhlenbeck model."""


class NotSymmetric(ModelError):
    pass


class NotPositiveDefinite(ModelError):
    pass


class NotHurwitz(ModelError):
    pass


class LyapunovSolveFailed(ModelError):
    pass


class QuadratureDivergence(OUError, ArithmeticError):
    """A matrix exponential overflowed or a time argument is out of range."""


class ZeroVector(OUError, ValueError):
    pass


class RootBracketFailure(OUError, RuntimeError):
    def __init__(self, message, bracket=None):
        super().__init__(message)
        self.bracket = bracket


class EmptyMultiindex(OUError, ValueError):
    pass


class QuadratureBudgetExceeded(OUError, RuntimeError):
    pass


class QuadratureNonconvergence(OUError, RuntimeError):
    def __init__(self, message, estimates=None):
        super().__init__(message)
        self.estimates = estimates


class ComplexEigenvalueUnsupported(OUError, ValueError):
    pass


class NearDiagonal(OUError, ValueError):
    pass


class SupportOverlap(OUError, ValueError):
    pass


class SpectralRouteUnavailable(OUError, ValueError):
    """The test function is not an eigenfunction of the generator."""


class UnknownEstimate(OUError, KeyError):
    pass


class DegenerateSample(OUError, ValueError):
    pass


class GridBudgetExceeded(OUError, RuntimeError):
    pass


class T0NotFound(OUError, RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class IoFailure(OUError, OSError):
    pass
