"""Exception types shared across the toolkit.

The CLI maps each class onto a process exit code.
"""


class PQDError(Exception):
    """Base class for toolkit errors."""


class ConfigError(PQDError, ValueError):
    """Invalid configuration value; ``path`` names the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class FormatError(PQDError, ValueError):
    """A file on disk does not match its documented binary layout."""


class NumericalError(PQDError, FloatingPointError):
    """A computation produced non-finite values."""
