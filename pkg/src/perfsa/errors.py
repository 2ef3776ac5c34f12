"""Exception hierarchy shared by every module."""


class PerfsaError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgument(PerfsaError, ValueError):
    pass


class UnsupportedMode(PerfsaError, ValueError):
    """Requested an analytic quantity for a family without a closed form."""


class InsufficientSamples(PerfsaError, ValueError):
    pass


class InsufficientCheckpoints(PerfsaError, ValueError):
    pass


class NumericalFailure(PerfsaError, ArithmeticError):
    """A non-finite value appeared; ``step`` and ``context`` locate it."""

    def __init__(self, message, step=None, context=None):
        super().__init__(message)
        self.step = step
        self.context = context or {}


class NonConvergence(PerfsaError, RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ContractionViolation(PerfsaError, RuntimeError):
    """Observed fixed-point ratios stayed at or above one."""

    def __init__(self, message, ratios=()):
        super().__init__(message)
        self.ratios = list(ratios)


class SingularJacobian(PerfsaError, ArithmeticError):
    pass


class DegenerateTilt(PerfsaError, RuntimeError):
    """Rejection sampler exhausted its proposal budget (normalizer near zero)."""


class ReplicaFailure(PerfsaError, RuntimeError):
    def __init__(self, message, replica=None, seed=None):
        super().__init__(message)
        self.replica = replica
        self.seed = seed


class ConfigError(PerfsaError, ValueError):
    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"config error ({', '.join(where)}): " if where else "config error: "
        super().__init__(prefix + message)
        self.key = key
        self.line = line
