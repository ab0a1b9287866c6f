"""facmap: incremental factorized neural-field mapping for dense RGB SLAM."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, DivergenceError, FacmapError

__all__ = ["ConfigError", "DataError", "DivergenceError", "FacmapError", "__version__"]
