from __future__ import annotations


class MalcveError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MalcveError):
    """Invalid or missing configuration (CLI exit code 2)."""
