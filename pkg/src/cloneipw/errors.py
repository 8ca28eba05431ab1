"""Exception hierarchy shared across the package.

The three branches map onto the CLI exit codes: configuration problems
(exit 2), data problems (exit 3), and numerical problems (exit 4).
"""


class CloneIpwError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(CloneIpwError):
    """Invalid or inconsistent run configuration."""

    exit_code = 2


class DataError(CloneIpwError):
    """Input data violates a structural invariant."""

    exit_code = 3


class SchemaError(DataError):
    """A required column or declared covariate is missing."""


class NumericalError(CloneIpwError):
    """A numerical procedure failed or produced a degenerate result."""

    exit_code = 4


class SeparationError(NumericalError):
    """Perfect separation detected in a logistic fit."""

    def __init__(self, columns, message=None):
        self.columns = list(columns)
        super().__init__(message or f"perfect separation detected in column(s): {', '.join(self.columns)}")


class RankDeficiencyError(NumericalError):
    """Design matrix is rank deficient."""

    def __init__(self, columns, message=None):
        self.columns = list(columns)
        super().__init__(message or f"design matrix rank deficient; dependent column(s): {', '.join(self.columns)}")


class PositivityError(NumericalError):
    """A fitted censoring probability is numerically zero."""


class DegenerateVarianceError(NumericalError):
    """Variance estimate is zero while the statistic is not."""


class CalibrationError(NumericalError):
    """Rate calibration failed to reach the requested tolerance."""
