"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes: UsageError -> 1, DataError -> 2,
NumericError -> 3.
"""


class FaithgenError(Exception):
    """Base class for all toolkit errors."""


class UsageError(FaithgenError):
    """Bad flags or argument values."""


class DataError(FaithgenError):
    """Malformed input files, schema violations, mismatched artifacts."""


class NumericError(FaithgenError):
    """Non-finite values or numerically impossible requests."""
