"""Bilinear pooling constructions, sketched (compact) bilinear pooling,
and multimodal low-rank attention networks, cross-verified against
exact oracles. See the CLI (`mlbnet --help`) for the report suites."""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    DivergenceError,
    EvaluationError,
    FormatError,
    MlbnetError,
)
from .tensor import Tape, Tensor, grad_check

__all__ = [
    "ConfigurationError",
    "DataError",
    "DimensionError",
    "DivergenceError",
    "EvaluationError",
    "FormatError",
    "MlbnetError",
    "Tape",
    "Tensor",
    "grad_check",
    "__version__",
]
