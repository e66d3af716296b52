"""Exception hierarchy shared across the package."""


class EcaError(Exception):
    """Base class for all package errors."""


class DegenerateVariance(EcaError, ValueError):
    """A standard deviation fell below the variance floor."""


class ShapeMismatch(EcaError, ValueError):
    pass


class NumericDomain(EcaError, ValueError):
    """log/sqrt/div evaluated outside its domain."""


class NonScalarLoss(EcaError, ValueError):
    pass


class NonPositiveTemperature(EcaError, ValueError):
    pass


class DimMismatch(EcaError, ValueError):
    pass


class InvalidConfig(EcaError, ValueError):
    pass


class Unreachable(EcaError, ValueError):
    """A calibration target lies outside what the generator can produce."""


class ZeroMseGradient(EcaError, ValueError):
    pass


class DivergenceDetected(EcaError, RuntimeError):
    """A loss term became non-finite during training.

    The partial trace collected so far is attached as ``trace``.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
