"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors -> 1, DataError -> 2,
NumericalError -> 3.
"""


class CanyonNavError(Exception):
    """Base class for all package errors."""


class DataError(CanyonNavError):
    """Malformed, inconsistent or missing input data."""


class ConfigError(DataError):
    """Invalid run configuration."""


class NumericalError(CanyonNavError):
    """Numerical failure (non-PSD covariance, divergence, ...)."""


class BelowHorizonError(CanyonNavError):
    """Satellite geometry below the local horizon."""


class InvalidGeometryError(CanyonNavError):
    """Geometry outside the valid domain (e.g. non-positive elevation)."""


class DegenerateGeometryError(CanyonNavError):
    """Triangulation geometry without enough parallax."""


class EmptyEpochError(CanyonNavError):
    """GNSS epoch with too few usable observations; caller skips the update."""


class ImuGapError(CanyonNavError):
    """Gap between consecutive IMU samples exceeds the tolerated maximum."""


class GenerationError(CanyonNavError):
    """Scenario generation failed (e.g. no visible satellites)."""
