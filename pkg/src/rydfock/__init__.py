"""Collective Rabi dynamics and Fock-state preparation in blockaded ensembles."""

from .ensemble import (
    AtomConfiguration,
    BeamProfile,
    CloudGeometry,
    PhysicalParams,
    ac_stark_shift,
    beam_rabi_at,
    blockade_shift,
    default_beams,
    doppler_shift,
    sample_cloud,
    scattering_rate,
    two_photon_rabi,
)
from .dynamics import (
    Basis,
    DriveSpec,
    ResourceLimitError,
    SparseHamiltonian,
    StateVector,
    StepSizeError,
    build_hamiltonian,
    enumerate_basis,
    lindblad_populations,
    make_w_state,
    propagate_exact,
    propagate_trajectory,
    trajectory_ensemble_populations,
)

__version__ = "0.1.0"
