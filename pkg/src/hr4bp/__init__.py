"""HR4BP dynamics near the Earth-Moon triangular points."""

from hr4bp.model import (
    ModelParams,
    State,
    UnitSet,
    HillOrbit,
    compute_hill_orbit,
    eom,
    hamiltonian,
    apply_symmetry,
    OMEGA_S,
    MAP_PERIOD,
    SEM_M,
    EM_MU,
)

__version__ = "0.1.0"
