"""Joint frame and reward prediction on toy pixel games (C++ core)."""

from ._jointdyn import (
    ConfigError,
    DataError,
    Dataset,
    FormatError,
    Model,
    NumericError,
    check_gradients,
    curriculum_phase,
    evaluate,
    generate,
    percentile,
    train,
)

__all__ = [
    "ConfigError",
    "DataError",
    "Dataset",
    "FormatError",
    "Model",
    "NumericError",
    "check_gradients",
    "curriculum_phase",
    "evaluate",
    "generate",
    "percentile",
    "train",
]
