"""Exception hierarchy shared across the toolkit.

Two branches matter for the CLI: ``InputError`` maps to exit code 2
(bad files, malformed records, mismatched counts) and ``NumericError``
maps to exit code 3 (degenerate geometry, failed optimization).
"""


class LoomkitError(Exception):
    """Base class for all toolkit errors."""


class InputError(LoomkitError):
    """Invalid or inconsistent input data."""


class NumericError(LoomkitError):
    """Numerically undefined or failed computation."""


class MalformedRecord(InputError):
    """Truncated or invalid record in an event file."""


class NonMonotonicTime(InputError):
    """Event timestamps disordered beyond the tolerated jitter."""


class CountMismatch(InputError):
    """More frames than trigger marks; carries the deficit."""

    def __init__(self, deficit: int, message: str | None = None):
        self.deficit = deficit
        super().__init__(message or f"frame/trigger count mismatch, deficit={deficit}")


class BinCountZero(InputError):
    """Voxelization requested with zero time bins."""


class BehindCamera(NumericError):
    """Point with non-positive depth cannot be projected."""


class NoConvergence(NumericError):
    """Iterative undistortion failed to reach the residual target."""


class UndefinedTTC(NumericError):
    """TTC undefined (relative speed or looming below threshold)."""


class UndefinedEta(NumericError):
    """Motion-in-depth undefined at the excluded point."""


class NonPositiveHeight(NumericError):
    """Height-ratio loss requires strictly positive heights."""


class SingularInnovationCovariance(NumericError):
    """Degenerate innovation covariance in the Kalman update."""


class NoEvents(InputError):
    """Too few event cells in an ROI to estimate scale."""


class FlatObjective(NumericError):
    """Correlation objective has no usable peak (textureless ROI)."""


class EstimationError(NumericError):
    """TTC estimation failed; carries per-modality causes."""

    def __init__(self, causes):
        self.causes = list(causes)
        detail = "; ".join(f"{m}: {e}" for m, e in self.causes)
        super().__init__(f"all modalities failed ({detail})")


class InvalidPrediction(NumericError):
    """Prediction outside the evaluable range (counts toward FR)."""


class NoMatches(NumericError):
    """True-positive metrics need at least one matched pair."""


class DegenerateSpec(InputError):
    """Synthetic scene whose object is never visible."""
