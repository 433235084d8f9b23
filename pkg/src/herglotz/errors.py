"""Exception and warning types raised by the solvers."""


class HerglotzError(Exception):
    """Base class for all solver failures."""


class NonConvergence(HerglotzError):
    pass


class SingularHessian(HerglotzError):
    pass


class NonFinite(HerglotzError, FloatingPointError):
    pass


class LineSearchFailure(HerglotzError):
    """Raised when the Wolfe search stalls; ``best`` carries the best iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class ShootingDivergence(HerglotzError):
    pass


class UnsupportedModel(HerglotzError, ValueError):
    pass


class NoAdmissiblePath(HerglotzError):
    pass


class ConfigError(HerglotzError, ValueError):
    pass


class RefinementWarning(UserWarning):
    """Step-halving error estimate exceeded its tolerance."""
