"""Exception types shared across the package."""


class PncaError(Exception):
    """Base class for errors raised by this package."""


class FormatError(PncaError):
    """A file does not conform to its declared byte/text layout."""


class DataError(PncaError):
    """A dataset is unusable (empty, inconsistent, out of range)."""


class NumericError(PncaError):
    """A computation produced non-finite values.

    When raised by a training loop, ``checkpoint`` holds the last
    all-finite parameter state so callers can salvage the run.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
