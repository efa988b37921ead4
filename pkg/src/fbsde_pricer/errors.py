"""Exception taxonomy shared across the package.

The CLI maps these onto distinct process exit codes, so library code
should raise the most specific class that applies.
"""


class PricerError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(PricerError):
    """Invalid configuration: unknown keys, bad op tags, missing files."""

    exit_code = 2


class DataError(PricerError):
    """Malformed or inconsistent input data (CSV rows, shapes, ranges)."""

    exit_code = 3


class NumericsError(PricerError):
    """Numerical failure: non-finite values where finiteness is required."""

    exit_code = 4
