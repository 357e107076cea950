"""Exception types shared across the package."""


class CSRNError(Exception):
    """Base class for all package errors."""


class RejectedInput(CSRNError, ValueError):
    """Arguments violate a shape, range or consistency precondition."""


class DivergenceError(CSRNError, FloatingPointError):
    """A network or trainer produced non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConditioningError(CSRNError, ArithmeticError):
    """The EKF innovation matrix could not be factorized."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class FilterDivergence(DivergenceError):
    """The weight covariance lost positive semi-definiteness."""


class GenerationFailure(CSRNError, RuntimeError):
    """A rejection sampler hit its retry cap."""


class OracleFailure(CSRNError, ArithmeticError):
    """A finite-difference oracle saw non-finite function values."""


class UndefinedMetric(CSRNError, ValueError):
    """A metric has no cells or patterns to average over."""


class ConfigError(CSRNError, ValueError):
    """An experiment configuration is malformed."""
