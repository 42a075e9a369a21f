"""Exception types shared across the package.

The CLI maps these onto its exit-code taxonomy: DataFormatError -> 2,
NumericsError -> 3. Plain ValueError from precondition checks is a
programmer error and is not caught.
"""


class DataFormatError(ValueError):
    """Malformed or inconsistent input data (files, metadata, models)."""


class NumericsError(RuntimeError):
    """Non-finite values or a failed numeric check at runtime."""
