"""Exception hierarchy shared by all modules."""


class DriftLabError(Exception):
    """Base class for every error raised by the package."""


class ParameterError(DriftLabError, ValueError):
    """Invalid model or numerical parameter."""


class DimensionError(DriftLabError, ValueError):
    """Array shapes that do not fit together."""


class GridError(DriftLabError, ValueError):
    """A time point that should be on a grid is not."""


class ConsistencyError(DriftLabError):
    """A simulated path left the set it is guaranteed to stay in."""


class NumericalError(DriftLabError):
    """A numerical scheme failed (CFL violation, loss of positivity, overflow)."""


class StatisticalValidityError(DriftLabError):
    """A Monte Carlo run produced too many non-finite samples to be trusted."""


class ConfigError(DriftLabError, ValueError):
    """Configuration file does not validate."""
