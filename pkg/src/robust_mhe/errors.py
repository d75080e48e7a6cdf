"""Exception types raised across the package."""


class EstimationError(Exception):
    """Base class for all package errors."""


class DomainError(EstimationError, ValueError):
    """An argument lies outside the domain of a comparison function."""


class RangeError(EstimationError, ValueError):
    """A value cannot be inverted because it exceeds the function range."""


class PreconditionError(EstimationError, ValueError):
    pass


class IterationLimit(EstimationError, RuntimeError):
    pass


class ConstraintError(EstimationError, ValueError):
    """A state or disturbance violates its constraint box."""


class LengthMismatch(EstimationError, ValueError):
    pass


class InfeasibleError(EstimationError, RuntimeError):
    """No candidate explains the measurements with noise inside V."""


class SolverError(EstimationError, RuntimeError):
    pass


class CapExceeded(EstimationError, RuntimeError):
    pass


class ConfigError(EstimationError, ValueError):
    pass
