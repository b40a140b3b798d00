"""Exception hierarchy shared by the estimation modules and the CLI."""


class GlivError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(GlivError, ValueError):
    """Bad configuration, malformed data, or unknown labels."""

    exit_code = 2


class MonotonicityError(ValidationError):
    """The type support violates unordered monotonicity."""

    def __init__(self, message, treatment=None, rows=None, cols=None):
        super().__init__(message)
        self.treatment = treatment
        self.rows = rows
        self.cols = cols


class EstimationError(GlivError, RuntimeError):
    """Estimation could not proceed on the given sample."""

    exit_code = 3


class EmptyCellError(EstimationError):
    """A covariate cell has no observation for some instrument level."""


class DegenerateSubpopulationError(EstimationError):
    """Estimated subpopulation probability is numerically zero."""


class ImplicationViolation(GlivError):
    exit_code = 4
