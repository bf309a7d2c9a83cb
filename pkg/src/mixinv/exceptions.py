"""Exception types shared across the package."""


class MixinvError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MixinvError):
    """Invalid or unreadable run configuration."""


class DataError(MixinvError):
    """Input data is malformed or inconsistent with the configuration."""


class NumericalError(MixinvError):
    """A numerical procedure failed to reach its stated tolerance."""


class SingularRegularizerError(NumericalError):
    """The regularizer matrix failed its invertibility certificate."""


class SolverConvergenceError(NumericalError):
    """Iterative solver did not converge within its iteration budget."""

    def __init__(self, message, iterations, residual):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class EvaluationError(NumericalError):
    """A density evaluation failed while a chain was running."""

    def __init__(self, message, position):
        super().__init__(message)
        self.position = position


class PlaneIntersectsSurfaceError(MixinvError):
    """Requested source plane is not strictly below the measurement surface."""


class ZeroDataError(DataError):
    """The observation vector is identically zero."""


class NoRootError(NumericalError):
    """The discrepancy equation has no root on the supplied bracket."""
