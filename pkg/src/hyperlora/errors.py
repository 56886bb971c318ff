"""Exception taxonomy shared across the package.

The command-line layer maps these onto process exit codes:
ConfigError -> 1, DataError -> 2, NumericError -> 3.
"""


class ConfigError(ValueError):
    """Invalid or unknown configuration (bad key, bad value, missing seed)."""


class DataError(RuntimeError):
    """Unusable input artifact: missing/corrupt file, malformed record, degenerate content."""


class NumericError(ArithmeticError):
    """Non-finite value detected where the numeric contract forbids one."""
