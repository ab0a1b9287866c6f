"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
DivergenceError -> 4. Everything else is a plain bug.
"""


class FacmapError(Exception):
    """Base class for all package errors."""


class ConfigError(FacmapError):
    """Invalid or unknown configuration."""


class DataError(FacmapError):
    """Dataset missing, malformed, or unreadable."""


class DivergenceError(FacmapError):
    """Optimization produced non-finite values and was aborted."""
