"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration, data, and format
problems exit 1, verification failures exit 2, divergence exits 3.
"""


class MlbnetError(Exception):
    """Base class for all package errors."""


class DimensionError(MlbnetError, ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ConfigurationError(MlbnetError, ValueError):
    """An option, dimension, or parameter value is invalid."""


class DataError(MlbnetError, ValueError):
    """A dataset, answer multiset, or target is malformed."""


class FormatError(MlbnetError, ValueError):
    """A serialized file does not match the expected binary/JSON layout."""


class EvaluationError(MlbnetError, RuntimeError):
    """A function produced a non-finite value where a finite one is required."""


class DivergenceError(MlbnetError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")
