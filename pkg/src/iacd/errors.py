"""Exception types shared across the package.

Configuration problems (bad user input) and numerical failures are kept
distinct so the command line can map them to different exit codes.
"""


class IacdError(Exception):
    """Base class for all package errors."""


class ConfigError(IacdError, ValueError):
    """Invalid user-supplied configuration or arguments."""


class NonstationaryError(ConfigError):
    """Parameter point violates the strict stationarity condition."""


class EmptySeriesError(IacdError):
    """A simulated span contained no complete duration."""


class FilterOverflowError(IacdError):
    """The conditional-duration recursion produced a non-finite value."""

    def __init__(self, index):
        self.index = index
        super().__init__(f"conditional duration filter overflowed at index {index}")


class SolverError(IacdError):
    """A numerical routine (quadrature, root finding, optimization) failed."""


class CalibrationError(SolverError):
    """Span calibration could not reach the target median event count."""


class SingularInformationError(SolverError):
    """Information matrix is singular or not positive definite."""

    def __init__(self, message, cond=None):
        self.cond = cond
        super().__init__(message)


class NonConvergenceError(SolverError):
    """Every optimizer start failed outright."""


class IngestionError(ConfigError):
    """Input records violate the expected tape layout."""

    def __init__(self, message, rows=None):
        self.rows = list(rows) if rows is not None else []
        super().__init__(message)
