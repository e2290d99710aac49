"""Exception types raised across the package.

Everything derives from SparseScError so callers can catch one base class.
The CLI maps DataError subclasses to exit code 2 and SolverError to 3.
"""


class SparseScError(Exception):
    """Base class for all package errors."""


class DataError(SparseScError):
    """Base class for input-data and configuration problems."""


class MissingDataError(DataError):
    """A (unit, time) cell is absent from the panel."""

    def __init__(self, cells):
        self.cells = list(cells)
        shown = ", ".join(f"({u}, {t})" for u, t in self.cells[:10])
        more = "" if len(self.cells) <= 10 else f" and {len(self.cells) - 10} more"
        super().__init__(f"missing observations for {shown}{more}")


class DuplicateObservationError(DataError):
    """The same (unit, time) pair appears more than once."""


class ParseError(DataError):
    """A cell could not be parsed as a number; carries the CSV row."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ConfigError(DataError):
    """Invalid or unknown configuration value."""


class DimensionError(SparseScError):
    """Array arguments do not have consistent shapes."""


class SolverError(SparseScError):
    """Optimization did not converge; carries the final residual."""

    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class InfeasibleAnchorError(ConfigError):
    """Anchor predictor index is out of range."""


class AllZeroWeightsError(SparseScError):
    """Predictor weights are identically zero and cannot be rescaled."""


class DegenerateDesignError(DataError):
    """Design matrix has no usable rows."""


class InsufficientDonorsError(DataError):
    """Too few donor units for the requested operation."""


class EstimatorError(SparseScError):
    """An estimator failed; used to tag placebo/study replication failures."""


class SingularFactorGramError(SparseScError):
    """The factor Gram matrix is numerically singular."""


class StudyError(SparseScError):
    """Too many Monte Carlo replications failed."""
