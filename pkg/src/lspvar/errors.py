"""Exception and warning types raised across the package."""


class LspvarError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(LspvarError, ValueError):
    pass


class TooShort(LspvarError, ValueError):
    pass


class NonFinite(LspvarError, ValueError):
    pass


class EmptyInput(LspvarError, ValueError):
    pass


class UnsortedInput(LspvarError, ValueError):
    pass


class ZeroRow(LspvarError, ValueError):
    """A row with zero l2 norm cannot be projected onto the equal-row-norm set."""


class SvdFailure(LspvarError, ArithmeticError):
    pass


class SolveFailure(LspvarError, ArithmeticError):
    pass


class NonDescent(LspvarError, RuntimeError):
    """The augmented Lagrangian increased between iterations; the step size is too small."""

    def __init__(self, message, iteration=None, rho=None):
        super().__init__(message)
        self.iteration = iteration
        self.rho = rho


class UnstableDraw(LspvarError, RuntimeError):
    pass


class NoConvergence(LspvarError, RuntimeError):
    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class BundleError(LspvarError, ValueError):
    """Malformed or missing estimate / truth bundle on disk."""


class DegenerateInput(UserWarning):
    pass


class DegenerateRow(UserWarning):
    pass


class RankDeficient(UserWarning):
    pass


class NotConverged(UserWarning):
    pass
