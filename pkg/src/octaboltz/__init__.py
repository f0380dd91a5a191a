"""Semi-discrete Boltzmann model on a truncated-octahedron velocity lattice."""

from .coefficients import (
    BuildSpec,
    CacheError,
    CheckResult,
    CoefficientSet,
    build_coefficients,
    build_gain,
    build_loss,
    check_coefficients,
    enforce_conservation,
    load_coefficients,
    save_coefficients,
)
from .diagnostics import RunRecord, goodness, read_timeseries, reconstruct_moments, write_timeseries
from .estimator import BoltzmannRelaxation
from .kernel import SphereQuadrature, gain_kernel, general, hard_sphere, nu, vhs, vhs_power, vhs_table
from .lattice import (
    CellIndex,
    VelocityLattice,
    build_lattice,
    cell_geometry,
    contains,
    locate,
    neighbors,
)
from .quadrature import CellQuadrature
from .solver import (
    CFLError,
    Grid1D,
    KineticState,
    SolverError,
    collision_rhs,
    initial_state,
    initialize_from_maxwellian,
    step_1d,
    step_homogeneous,
)

__version__ = "0.1.0"
