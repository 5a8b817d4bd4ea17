"""Exception types shared across the package."""


class AxijetError(Exception):
    """Base class for all package-specific failures."""


class NoSubsonicRootError(AxijetError):
    """Bernoulli inversion has no root on the subsonic branch.

    Carries the offending momentum value and, when raised from the
    pressure-interval helper, the largest admissible total mass flux
    in ``threshold``.
    """

    def __init__(self, message, threshold=None):
        super().__init__(message)
        self.threshold = threshold


class MeshQualityError(AxijetError):
    """Triangulation violated a hard quality guarantee (positivity, angles)."""


class SolverDivergenceError(AxijetError):
    """Projected gradient loop failed to reach the requested tolerance."""


class NoCrossingError(AxijetError):
    """No level-set crossing found in a mesh column during surface extraction."""


class NonGraphSurfaceError(AxijetError):
    """Multiple level-set crossings in one column: surface is not a graph."""


class BracketError(AxijetError):
    """Shooting bracket does not enclose a sign change of the fit residual."""


class MaxBisectionsError(AxijetError):
    """Bisection budget exhausted before any stopping rule was met."""


class StageDivergenceError(AxijetError):
    """Domain continuation stalled: fitted parameter oscillates between stages."""


class ConfigError(AxijetError):
    """Run configuration failed to parse or violates a precondition."""
