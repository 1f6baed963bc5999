"""
g2kit error hierarchy
Every failure raised by the library derives from G2KitError so the CLI can
map it to an exit code in one place.
"""

from typing import Any, Dict, Optional


class G2KitError(Exception):
    """Base class for all g2kit errors"""
    exit_code = 2


# timetag

class TimeTagFormatError(G2KitError):
    """Bad magic or unsupported version in a TTAG header"""


class TimeTagIntegrityError(G2KitError):
    """Records violate the stream invariants (ordering, channel ids, duration)"""

    def __init__(self, message: str, offset: Optional[int] = None):
        super().__init__(message)
        self.offset = offset


class TruncatedRecordError(G2KitError, OSError):
    """File ends in the middle of a header or record"""


class CsvParseError(G2KitError):
    """Unparseable row in a CSV input"""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message)
        self.line = line


# correlator

class UsageError(G2KitError):
    """Arguments are inconsistent with each other"""


class GeometryError(G2KitError):
    """Chronogram geometry is invalid or two geometries differ"""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


# estimator

class WindowRangeError(G2KitError):
    """A coincidence window falls outside the chronogram range"""


class WindowOverlapError(G2KitError):
    """The background, true and accidental windows overlap"""


class DegenerateStatisticsError(G2KitError):
    """Accidental peak indistinguishable from background, or non-positive denominator"""


# uncertainty

class UndefinedCorrelationError(G2KitError):
    """Correlation requested for a series with zero variance or too few runs"""


class InconsistentCorrelationError(G2KitError):
    """Correlation matrix yields a negative variance"""


class CoverageFactorMismatchError(G2KitError):
    """Budgets compared at different coverage factors"""


# lifetime

class LifetimeFitError(G2KitError):
    """Lifetime fit did not converge"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# simulator / configuration

class UnsupportedConfigurationError(G2KitError):
    """Closed-form expectations requested outside their domain of validity"""


class ConfigError(G2KitError):
    """Invalid key=value configuration"""
