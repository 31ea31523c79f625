"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, numeric failures exit 3.
"""


class NovocapError(Exception):
    """Base class for all package errors."""


class UsageError(NovocapError):
    """Bad command-line invocation or configuration."""


class DataError(NovocapError):
    """Malformed input files, vocabularies, or records."""


class NumericError(NovocapError):
    """Non-finite values, shape mismatches, or failed numeric contracts."""
