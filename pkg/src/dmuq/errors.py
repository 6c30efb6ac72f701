"""Exception hierarchy.

Every error carries a short machine-parsable ``category`` that the CLI prints
on failure.
"""


class DMUQError(Exception):
    category = "error"


class UsageError(DMUQError, ValueError):
    category = "usage"


class InvalidParameterError(DMUQError, ValueError):
    category = "invalid-parameter"


class NonPSDError(DMUQError, ValueError):
    category = "non-psd"


class SingularMatrixError(DMUQError, ValueError):
    category = "singular-matrix"


class InsufficientDataError(DMUQError, ValueError):
    category = "insufficient-data"


class ConfigError(DMUQError, ValueError):
    category = "config"


class GeometryError(DMUQError, ValueError):
    category = "undefined-geometry"


class MetricError(DMUQError, ValueError):
    category = "undefined-metric"


class TrainingError(DMUQError, RuntimeError):
    category = "training"


class EstimationError(DMUQError, RuntimeError):
    category = "estimation"


class FormatError(DMUQError, ValueError):
    category = "format"
