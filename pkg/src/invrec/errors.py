"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config problems -> 2, data problems -> 3,
numeric failures -> 4.
"""


class InvrecError(Exception):
    """Base class for all package errors."""


class ConfigError(InvrecError):
    """Invalid configuration value or unknown config field."""


class DataError(InvrecError):
    """Structurally invalid data (out-of-range ids, empty inputs, bad splits)."""


class ParseError(DataError):
    """Malformed input row; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(DataError):
    """Input row refers to a behavior label missing from the declared schema."""


class NumericError(InvrecError):
    """Non-finite loss or gradient, or a failed numeric verification."""


class CheckpointError(InvrecError):
    """Corrupt, truncated, or incompatible checkpoint file."""
