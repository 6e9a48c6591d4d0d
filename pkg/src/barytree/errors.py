"""Exception hierarchy shared by all modules."""


class BarytreeError(Exception):
    """Base class for library errors."""


class ConfigError(BarytreeError, ValueError):
    pass


class DomainError(BarytreeError, ValueError):
    pass


class DegenerateInputError(BarytreeError, ValueError):
    pass


class NearDegenerateMapError(BarytreeError, ArithmeticError):
    pass


class ResourceError(BarytreeError):
    pass


class PreconditionError(BarytreeError, ValueError):
    pass


class StructureError(BarytreeError, ValueError):
    pass


class InternalConsistencyError(BarytreeError, AssertionError):
    pass


class NumericError(BarytreeError, ArithmeticError):
    """Iterative solver failed; ``residual`` carries the last residual(s)."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConvergenceError(NumericError):
    pass


class ConcentrationError(NumericError):
    pass


class SearchFailure(NumericError):
    pass
