"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of a function or distribution."""


class ConvergenceError(ArithmeticError):
    """An iterative evaluation exhausted its iteration budget.

    ``last`` holds the last iterate for every element (converged or not) and
    ``failed`` is a boolean mask of the elements that did not converge.
    """

    def __init__(self, message, last=None, failed=None):
        super().__init__(message)
        self.last = last
        self.failed = failed


class DegenerateWindowError(DomainError):
    """A truncation window carries (numerically) no probability mass."""


class DegenerateResponsibilityError(ArithmeticError):
    """Posterior mixture weights have a numerically zero normalizer."""


class SamplerError(RuntimeError):
    """A rejection sampler hit its proposal cap."""


class GradientOverflowError(ArithmeticError):
    """An implicit gradient is not finite because the density at the draw is ~0."""
