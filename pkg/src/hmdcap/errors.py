"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, numerical failures exit 3.
"""


class HmdcapError(Exception):
    pass


class DimensionError(HmdcapError, ValueError):
    """Coefficient vector or array shape does not match the model."""


class GeometryError(HmdcapError, ValueError):
    """Degenerate or invalid geometric input (rank deficiency, bad rotation)."""


class DataError(HmdcapError):
    """Missing, malformed, or inconsistent files on disk."""


class EllipseFitError(HmdcapError, ValueError):
    """Conic fit failed or did not produce an ellipse."""


class NumericalError(HmdcapError):
    """Divergence or loss of numerical validity during iteration."""
