"""Exception hierarchy shared by every stage of the pipeline."""


class TnfsError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(TnfsError, ValueError):
    """Bad shapes, non-finite values or out-of-range parameters."""


class NumericOverflowError(TnfsError, ArithmeticError):
    """A rollout or gradient produced a non-finite intermediate."""

    def __init__(self, message, sequence_index=None):
        super().__init__(message)
        self.sequence_index = sequence_index


class DivergenceError(TnfsError, ArithmeticError):
    """Training loss became non-finite."""

    def __init__(self, message, last_finite_epoch=None):
        super().__init__(message)
        self.last_finite_epoch = last_finite_epoch


class DegenerateDataError(TnfsError, ValueError):
    """Clustering input carries no usable spread."""


class UndefinedIndexError(TnfsError, ValueError):
    """A validity index was requested where it has no definition."""


class ArchiveVersionError(TnfsError, ValueError):
    """A model archive was written by an incompatible format version."""
