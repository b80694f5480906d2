"""Exception types raised across the mapping stack."""


class GpsdfError(Exception):
    """Base class for library errors."""


class ConfigError(GpsdfError, ValueError):
    """Invalid or unknown configuration value."""


class DataError(GpsdfError, ValueError):
    """Malformed input file or inconsistent data."""


class EmptyOracleSetError(GpsdfError, ValueError):
    pass


class EMDivergedError(GpsdfError, FloatingPointError):
    pass


class DegenerateGradientError(GpsdfError, ValueError):
    pass


class FlatFieldError(GpsdfError, ValueError):
    pass


class GridMismatchError(GpsdfError, ValueError):
    pass


class IllConditionedError(GpsdfError, ArithmeticError):
    pass


class StaleModelError(GpsdfError, RuntimeError):
    pass


class PosteriorUnderflowError(GpsdfError, ArithmeticError):
    pass


class QueryOnSampleError(GpsdfError, ValueError):
    pass


class OutOfOrderFrameError(GpsdfError, ValueError):
    pass


class UnmappedRegionError(GpsdfError, LookupError):
    pass
