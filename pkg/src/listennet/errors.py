"""Exception types shared across the package."""


class ListenNetError(Exception):
    """Base class for all package errors."""


class ShapeError(ListenNetError, ValueError):
    pass


class ConfigError(ListenNetError, ValueError):
    pass


class DataError(ListenNetError, ValueError):
    pass


class FormatError(ListenNetError, ValueError):
    pass


class UsageError(ListenNetError, RuntimeError):
    """An object was used outside its contract (e.g. a cache consumed twice)."""


class MetricError(ListenNetError, ValueError):
    pass
