"""Incremental signed distance field mapping with Bayesian Hilbert maps and log-GP regression."""

from .config import Config
from .errors import (ConfigError, DataError, GpsdfError, OutOfOrderFrameError,
                     UnmappedRegionError)
from .gp import KernelSpec, SdfQueryResult
from .mapping import KernelSdfMap
from .scenes import Scene, SensorFrame

__all__ = [
    "Config", "ConfigError", "DataError", "GpsdfError", "KernelSdfMap", "KernelSpec",
    "OutOfOrderFrameError", "Scene", "SdfQueryResult", "SensorFrame", "UnmappedRegionError",
]
__version__ = "0.1.0"
