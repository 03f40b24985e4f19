"""Exception and warning types raised across the package."""


class MudraError(Exception):
    """Base class for all package errors."""


class ValidationError(MudraError, ValueError):
    """Invalid input: bad shapes, ranges, or arguments."""


class NumericalError(MudraError, ArithmeticError):
    """A numerical routine could not produce a trustworthy result."""


class DimensionMismatch(ValidationError):
    pass


class InvalidBasisSize(ValidationError):
    pass


class InvalidDomain(ValidationError):
    pass


class OutOfDomain(ValidationError):
    pass


class EmptyClass(ValidationError):
    pass


class InvalidPolicy(ValidationError):
    pass


class UnknownFunction(ValidationError):
    pass


class UnknownTime(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class SingularEquation(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


class NotPositiveSemiDefinite(NumericalError):
    pass


class CovarianceSingular(NumericalError):
    pass


class FlipFlopDivergence(NumericalError):
    pass


class SingularNormalEquations(NumericalError):
    pass


class DegenerateFactor(RuntimeWarning):
    """A CP least-squares subproblem was rank deficient (pseudo-inverse used)."""


class RankDeficientProjection(RuntimeWarning):
    """The embedding Gram matrix was singular (pseudo-inverse square root used)."""
