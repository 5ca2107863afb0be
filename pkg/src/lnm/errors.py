"""Exception types shared across the package."""


class LnmError(Exception):
    """Base class for all package errors."""


class ShapeError(LnmError):
    """Array dimensions disagree with what an operation expects."""


class LabelRangeError(LnmError):
    """A label falls outside [0, k)."""


class ConfigError(LnmError):
    """Invalid or unknown configuration value."""


class DomainError(LnmError):
    """Scalar argument outside its mathematical domain."""


class NumericFaultError(LnmError):
    """Non-finite value encountered where finiteness is required."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class DegenerateRowError(LnmError):
    """A softmax row has no finite entry to normalize."""


class EmptyClassError(LnmError):
    """A class ended up with zero samples."""


class StratificationError(LnmError):
    """Split fractions cannot be realized on the given class counts."""


class FormatError(LnmError):
    """Malformed flat binary file. Carries the failing byte offset."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class MatrixError(LnmError):
    """A transition matrix violates row-stochasticity or shape."""


class TruncationError(LnmError):
    """Truncated-normal interval carries negligible probability mass."""


class DegenerateFitError(LnmError):
    """Mixture fit impossible (e.g. all losses identical)."""


class VolumeDegeneracyError(LnmError):
    """Transition matrix determinant collapsed to ~0."""


class EstimationError(LnmError):
    """Transition-matrix estimation cannot proceed."""


class UndefinedMetricError(LnmError):
    """Metric has no value (e.g. ratio over an empty selection)."""


class IncompleteTableError(LnmError):
    """Ranking requested on a score table with missing cells."""
