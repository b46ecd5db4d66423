"""Exception and warning types shared across the package."""


class ScsurvError(Exception):
    """Base class for all package-specific errors."""


class NegativeTimeError(ScsurvError):
    """A follow-up time was negative."""


class EmptyArmError(ScsurvError):
    """A treatment arm has no observed events."""


class InvalidWidthError(ScsurvError):
    """Bin width must be strictly positive."""


class InputFormatError(ScsurvError):
    """Malformed input file (bad header, bad value, wrong column count)."""


class GridMismatchError(ScsurvError):
    """Two step curves do not share the same event-time grid."""


class DimensionMismatchError(ScsurvError):
    """Vector lengths do not match the event grid."""


class SolverFailureError(ScsurvError):
    """The constrained optimizer did not reach its convergence contract.

    When raised during a profile search, ``theta`` and ``gamma`` carry the
    failing candidate.
    """

    def __init__(self, message, theta=None, gamma=None):
        super().__init__(message)
        self.theta = theta
        self.gamma = gamma


class InfeasibleStartError(ScsurvError):
    """Internal bug guard: the zero vector is always feasible, so a solver
    should never find itself without a feasible starting point."""


class DegenerateWindowError(ScsurvError):
    """Too few grid points to run a local regression smoother."""


class ZeroSurvivalError(ScsurvError):
    """Conditioning on survival to a time where the curve has hit zero."""


class CrossingOutOfRangeError(ScsurvError):
    """Average hazard ratios need a crossing time strictly inside (0, t_m)."""


class ExtrapolationWarning(UserWarning):
    """Truncation time lies beyond the last event time; the flat tail of the
    step curve is used for the remaining area."""


class ReplicateFailureWarning(UserWarning):
    """More than 1% of resampling replicates failed and were excluded."""
