"""Exception types shared across the package (mapped to CLI exit codes)."""


class InputError(Exception):
    """Bad or unreadable input data (exit code 1)."""


class ConfigError(ValueError):
    """Invalid parameters or configuration (exit code 2)."""


class InvariantError(AssertionError):
    """An internal consistency check failed (exit code 3)."""
