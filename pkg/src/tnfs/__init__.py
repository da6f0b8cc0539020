"""Temporal neuro-fuzzy system: a recurrent Takagi-Sugeno state-space model."""

from .errors import (ArchiveVersionError, DegenerateDataError, DivergenceError,
                     InvalidArgumentError, NumericOverflowError, TnfsError,
                     UndefinedIndexError)
from .model import TnfsModel, rollout, state_transition

__all__ = [
    "ArchiveVersionError", "DegenerateDataError", "DivergenceError", "InvalidArgumentError",
    "NumericOverflowError", "TnfsError", "TnfsModel", "UndefinedIndexError", "rollout",
    "state_transition",
]
