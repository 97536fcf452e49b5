"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericsError -> 4.
"""


class DuvDiffError(Exception):
    """Base class for all package errors."""


class ConfigError(DuvDiffError):
    """Invalid configuration file or parameter value."""


class DataError(DuvDiffError):
    """Bad input data: missing files, shape mismatches, format problems."""


class NumericsError(DuvDiffError):
    """Numerical failure: truncation limits, non-finite results."""


class TruncationError(NumericsError):
    """Channel truncation cannot reach the requested residual mass."""

    def __init__(self, message, residual_mass):
        super().__init__(message)
        self.residual_mass = residual_mass


class EmptyImageError(NumericsError):
    """No trajectory reached the detector; carries per-station statistics."""

    def __init__(self, message, station_stats):
        super().__init__(message)
        self.station_stats = station_stats
