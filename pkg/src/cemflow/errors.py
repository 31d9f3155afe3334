"""Exception types shared across the package."""


class CemflowError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CemflowError):
    """Invalid user-supplied configuration (grid sizes, factors, config files)."""


class ValidationError(CemflowError):
    """Data fails a physical/mathematical validity check (signs, shapes)."""


class SolverError(CemflowError):
    """A linear or nonlinear solve failed to converge or was singular.

    Carries the last iterate in ``last_iterate`` when available.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class RasterIOError(CemflowError):
    """Raster file could not be read or has the wrong length."""
