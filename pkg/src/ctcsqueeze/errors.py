"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates a documented precondition (bad shape, NaN, out-of-range id)."""


class OracleSizeError(ValueError):
    """A brute-force oracle was asked to enumerate more paths than its guard allows."""


class DataError(RuntimeError):
    """A file or dataset is missing, malformed, or inconsistent."""


class UsageError(RuntimeError):
    """Bad command-line arguments."""


class TrainingDivergedError(RuntimeError):
    """Training loss was non-finite for an entire epoch."""
