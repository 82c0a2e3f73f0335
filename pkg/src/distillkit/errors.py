"""Exception hierarchy shared by all distillkit modules."""


class DistillkitError(Exception):
    """Base class for all library errors."""


class DomainError(DistillkitError):
    """An argument lies outside the mathematical domain of an operation."""


class ShapeError(DistillkitError):
    """Tensor shapes are inconsistent with the operation's contract."""


class ZeroNormError(DistillkitError):
    """A vector that must be normalized has (numerically) zero norm."""


class NumericalError(DistillkitError):
    """A computation produced non-finite or otherwise unusable values."""


class InsufficientNegativesError(DistillkitError):
    """The eligible negative set is smaller than the requested count."""


class DataError(DistillkitError):
    """A dataset is unreadable, unpaired, or otherwise malformed."""


class ConfigError(DistillkitError):
    """A run configuration failed validation.

    The message names the offending field so CLI diagnostics can point
    at it directly.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class NonConvergenceError(DistillkitError):
    """An iterative fit failed to make progress."""


class DegenerateError(DistillkitError):
    """Input data is degenerate (e.g. a zero-variance column)."""
