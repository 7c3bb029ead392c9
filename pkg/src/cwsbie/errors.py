"""Exception and warning types raised across the package."""

from __future__ import annotations


class CwsError(Exception):
    """Base class for all numerical failures reported by the library."""


class ConfigError(CwsError):
    """Invalid run configuration. ``key`` names the offending entry."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class NonEmbedded(CwsError):
    pass


class AxisIntersection(CwsError):
    pass


class DegenerateCell(CwsError):
    pass


class SingularPeriodMatrix(CwsError):
    pass


class AssemblyFailure(CwsError):
    pass


class NotMeanZero(CwsError):
    pass


class SolveFailure(CwsError):
    pass


class NoConvergence(CwsError):
    pass


class OnFilament(CwsError):
    pass


class FilamentIntersectsDomain(CwsError):
    pass


class NearSurfacePoint(UserWarning):
    """Evaluation point closer to the surface than half a grid spacing."""


class IllConditioned(UserWarning):
    """A dense solve lost accuracy; the result is still returned."""


class RankDeficient(UserWarning):
    """A least-squares fit dropped directions below the truncation level."""
