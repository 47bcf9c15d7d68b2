class HDQKDError(Exception):
    """Base class for every error raised by the analysis engine."""


class DomainError(HDQKDError, ValueError):
    pass


class DimensionError(HDQKDError, ValueError):
    pass


class RangeLimitError(HDQKDError, ValueError):
    pass


class PreconditionError(HDQKDError, ValueError):
    pass


class NumericalError(HDQKDError, ArithmeticError):
    pass


class InfeasibleStatisticsError(HDQKDError):
    """Statistics that no Bell-diagonal state can produce."""

    def __init__(self, message: str, negativity: float = 0.0):
        super().__init__(message)
        self.negativity = negativity


class ConfigError(HDQKDError):
    pass
