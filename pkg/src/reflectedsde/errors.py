"""Exception types shared across the package."""


class ReflectedSDEError(Exception):
    """Base class for all package errors."""


class OutOfDomain(ReflectedSDEError):
    """A point that must lie in the closed domain does not."""


class InfeasibleStep(ReflectedSDEError):
    """A constrained step could not be resolved within the iteration budget."""


class ProjectionDiverged(ReflectedSDEError):
    """Closest-point search failed to converge."""


class NoBoundarySamples(ReflectedSDEError):
    """Boundary sampling produced no usable points."""


class InvalidHorizon(ReflectedSDEError):
    """Nonpositive time horizon."""


class LevelTooFine(ReflectedSDEError):
    """Requested interpolation level exceeds the path's fine level."""


class NonFiniteState(ReflectedSDEError):
    """Integration produced NaN or Inf state components."""


class MismatchedTimes(ReflectedSDEError):
    """Two paths that must share output times do not."""


class DegenerateFit(ReflectedSDEError):
    """Rate fit is impossible: fewer than two points, nonpositive or constant errors."""


class ExperimentFailed(ReflectedSDEError):
    """Too many per-path solver failures to report a trustworthy estimate."""


class ConfigError(ReflectedSDEError):
    """Experiment configuration is malformed or inconsistent."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
