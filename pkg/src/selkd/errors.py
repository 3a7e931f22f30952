"""Exception hierarchy shared across the package."""
from __future__ import annotations


class SelkdError(Exception):
    """Base class for all package errors."""


class ConfigError(SelkdError, ValueError):
    """Invalid configuration. ``field`` names the offending setting when known."""

    def __init__(self, message: str, field: str | None = None) -> None:
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class ContractError(SelkdError, RuntimeError):
    """A caller broke a documented precondition (e.g. an empty supervision mask)."""


class CacheCapacityError(SelkdError, ValueError):
    """A value does not fit in the 24-bit cache record."""


class CacheCorruptionError(SelkdError, ValueError):
    """Cache bytes decode to an invalid sparse target or malformed file."""
