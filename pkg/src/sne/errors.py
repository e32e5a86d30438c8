"""Exception hierarchy shared by every module."""


class SneError(Exception):
    """Base class for all package errors."""


class ShapeError(SneError, ValueError):
    pass


class ParameterError(SneError, ValueError):
    pass


class GeometryError(SneError, ValueError):
    pass


class NonFiniteError(SneError, FloatingPointError):
    pass


class DeterminismError(SneError, RuntimeError):
    pass


class CheckpointError(SneError):
    pass


class FormatError(SneError):
    """Malformed on-disk container (bad magic, truncated payload, ...)."""
