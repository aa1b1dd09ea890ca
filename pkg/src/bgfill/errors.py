"""Exception taxonomy shared across the kit."""


class BgfillError(Exception):
    """Base class for all kit-specific errors."""


class DimensionError(BgfillError, ValueError):
    """Shapes, widths, or token counts do not line up."""


class NumericError(BgfillError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigError(BgfillError, ValueError):
    """Invalid or inconsistent configuration."""


class ScheduleError(BgfillError, ValueError):
    """Timestep outside the noise schedule."""


class RoutingError(BgfillError, ValueError):
    """Block/tap routing mismatch."""


class FormatError(BgfillError, ValueError):
    """Corrupt or mismatched on-disk artifact."""


class MetricError(BgfillError, ValueError):
    """Metric undefined for the given inputs (e.g. empty reference mask)."""


class InfeasibleCropError(BgfillError, RuntimeError):
    """No crop window at the requested aspect can contain the subject."""
