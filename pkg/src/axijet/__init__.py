"""Axially symmetric compressible impinging jet, free-boundary variational solver.

The package is organized bottom-up:

    gas          isentropic gas relations, Bernoulli inversion, energy density
    geometry     nozzle/ground wall shapes and graded triangulations
    solver       projected-gradient minimization of the jet functional
    freeboundary free surface extraction and physical diagnostics
    shooting     momentum-parameter fit so the surface leaves the nozzle lip
    critical     scan of the incoming mass flux up to loss of subsonicity
    cli          command line front end
"""

from .gas import (
    GasModel,
    BernoulliState,
    bernoulli_state,
    density_from_momentum,
    density_cutoff,
    energy_density,
    jet_energy_scale,
    pressure_interval,
    inlet_state,
)
from .errors import (
    AxijetError,
    NoSubsonicRootError,
    MeshQualityError,
    SolverDivergenceError,
    NoCrossingError,
    NonGraphSurfaceError,
    BracketError,
    MaxBisectionsError,
    StageDivergenceError,
)

__version__ = "0.1.0"
