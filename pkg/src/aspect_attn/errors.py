"""Exception types shared across the package."""


class AspectAttnError(Exception):
    """Base class for all package errors."""


class ShapeError(AspectAttnError, ValueError):
    """Tensor extents are incompatible with an operation."""


class DomainError(AspectAttnError, ValueError):
    """An argument lies outside the documented domain (bad axis, rate >= 1, ...)."""


class ConfigError(AspectAttnError, ValueError):
    """A configuration is internally inconsistent or does not match the data."""


class DataFormatError(AspectAttnError, ValueError):
    """A file on disk is malformed, truncated or of the wrong version."""


class NonFiniteError(AspectAttnError, FloatingPointError):
    """A NaN or Inf appeared where a finite value is required."""
