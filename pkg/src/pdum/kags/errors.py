"""Exception hierarchy shared by every ``pdum.kags`` module.

Each error derives from :class:`KagsError` and from the builtin exception that
best matches its meaning, so callers may catch either family.
"""

from __future__ import annotations

__all__ = [
    "KagsError",
    "DimensionError",
    "ContractError",
    "ConfigError",
    "ConfigMismatchError",
    "ValidationError",
    "ParseError",
    "FormatError",
    "NumericError",
    "OracleError",
    "JoinError",
]


class KagsError(Exception):
    """Root of all library errors."""


class DimensionError(KagsError, ValueError):
    """Tensor extents are incompatible with an operation."""


class ContractError(KagsError, RuntimeError):
    """A precondition or usage contract was violated."""


class ConfigError(KagsError, ValueError):
    """A run configuration is invalid."""


class ConfigMismatchError(ConfigError):
    """A stored artifact was produced under a different configuration."""

    def __init__(self, key: str, stored: object, expected: object) -> None:
        super().__init__(f"config mismatch on {key!r}: stored {stored!r}, expected {expected!r}")
        self.key = key
        self.stored = stored
        self.expected = expected


class ValidationError(KagsError, ValueError):
    """An input record failed validation."""


class ParseError(ValidationError):
    """A text input could not be parsed."""


class FormatError(KagsError, ValueError):
    """A binary file does not follow its declared layout."""


class NumericError(KagsError, FloatingPointError):
    """An operation produced NaN or infinite values."""


class OracleError(KagsError, RuntimeError):
    """A verification oracle could not produce a trustworthy answer."""


class JoinError(ValidationError):
    """Records referenced by one file are missing from another."""

    def __init__(self, message: str, missing: list[str]) -> None:
        super().__init__(message)
        self.missing = missing
