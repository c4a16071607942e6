"""Shared exception types."""


class FormatError(Exception):
    """Raised when a binary file fails to parse; message names the byte offset."""


class ConfigError(Exception):
    """Raised for invalid configuration or infeasible generation requests."""
