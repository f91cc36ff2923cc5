"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: DataError -> 2,
DegeneracyError -> 3.
"""


class DataError(ValueError):
    """Malformed or inconsistent input: bad files, missing fields, shape mismatches."""


class DegeneracyError(ValueError):
    """Numerically degenerate input: zero matrices, constant targets, singular Grams."""
