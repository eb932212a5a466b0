"""Exception hierarchy.

Every error raised by the library derives from :class:`SlowFastError`.  The
``exit_code`` attribute is what the command line returns when the error
escapes an experiment (2 = configuration, 3 = numerical failure).
"""


class SlowFastError(Exception):
    exit_code = 3


class ConfigError(SlowFastError, ValueError):
    exit_code = 2

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


# model
class EvaluationFailure(SlowFastError):
    pass


class JacobianMismatch(SlowFastError):
    pass


# manifold
class NoConvergence(SlowFastError):
    pass


class SingularJacobian(SlowFastError):
    pass


# lyap
class NotHurwitz(SlowFastError):
    pass


class IllConditioned(SlowFastError):
    pass


class NotControllable(SlowFastError):
    pass


# flow / sde
class LeftDomainImmediately(SlowFastError):
    pass


class StiffnessFailure(SlowFastError):
    pass


class GridMismatch(SlowFastError):
    pass


class PSDLoss(SlowFastError):
    pass


# exitlab
class OutsideDomain(SlowFastError):
    pass


class InsufficientData(SlowFastError):
    pass


class DegenerateEstimate(SlowFastError):
    """Raised only on request; exit_probability records degeneracy instead."""


# bif
class NoSpectralGap(SlowFastError):
    pass


class WrongCriticalCount(SlowFastError):
    pass


class RegimeViolation(SlowFastError):
    pass
