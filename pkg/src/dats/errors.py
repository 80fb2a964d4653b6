"""Exception types raised across the package."""


class DatsError(Exception):
    """Base class for all package errors."""

    code = "dats_error"


class ConfigurationError(DatsError, ValueError):
    code = "configuration"


class UsageError(DatsError, ValueError):
    code = "usage"


class NumericError(DatsError, ArithmeticError):
    code = "numeric"


class DegenerateGeometryError(DatsError, ValueError):
    """Class-mean matrix is rank deficient, so proportions are not identifiable."""

    code = "degenerate_geometry"


class DegenerateGridError(DatsError, ValueError):
    code = "degenerate_grid"


class IncompleteStatsError(DatsError, ValueError):
    code = "incomplete_stats"


class DegenerateWeightsError(DatsError, ValueError):
    code = "degenerate_weights"


class UnsupportedMetricError(DatsError, ValueError):
    code = "unsupported_metric"


class LoadError(DatsError, ValueError):
    code = "load"
