"""Exception hierarchy shared by all subpackages."""


class KgmpcError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(KgmpcError, ValueError):
    pass


class NetworkError(KgmpcError):
    """Admittance data cannot be reduced (singular block, islanding)."""

    def __init__(self, message, buses=()):
        super().__init__(message)
        self.buses = tuple(buses)


class ConvergenceError(KgmpcError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class DivergenceError(KgmpcError):
    """Simulation left the admissible state region."""

    def __init__(self, message, time=float("nan")):
        super().__init__(message)
        self.time = time


class EventError(KgmpcError, ValueError):
    pass


class IntegrityError(KgmpcError):
    """Persisted data failed a structural or hash check."""


class QpIterationError(KgmpcError):
    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate
