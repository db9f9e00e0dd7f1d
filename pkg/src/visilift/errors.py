"""Error types raised by visilift.

Every error carries the process exit code the CLI maps it to.
"""

from typing import Optional


class VisiliftError(Exception):
    """Base class for all visilift errors."""

    exit_code = 1


class ConfigError(VisiliftError, ValueError):
    """Invalid or missing configuration."""

    exit_code = 2


class FormatError(VisiliftError, ValueError):
    """A file does not follow its binary or JSON layout."""

    exit_code = 3


class ValidationError(VisiliftError, ValueError):
    """Well-formed data that breaks a domain invariant."""

    exit_code = 4

    def __init__(self, message: str, index: Optional[int] = None):
        if index is not None:
            message = f"{message} (index {index})"
        super().__init__(message)
        self.index = index


class NumericalError(VisiliftError, RuntimeError):
    """A numeric state the algorithms should never reach."""

    exit_code = 1
