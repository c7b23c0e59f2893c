"""Physical scenario sampling.

Builds one realization of the trapped ensemble: Gaussian cloud positions,
Maxwell-Boltzmann velocities, Gaussian excitation beams, per-atom two-photon
couplings and detunings (Doppler + differential light shift), and the
pairwise r^-6 interaction matrix.

Sign conventions: the intermediate-state detuning is signed (negative for
red detuning from the intermediate level); all other magnitudes positive.
Detunings stored per atom are measured relative to the two-photon resonance
of an atom at the cloud centre, i.e. the drive laser is assumed tuned onto
the light-shifted line there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .units import KB, RB87_MASS, TWO_PI, rad_per_us, thermal_velocity_sigma

DEFAULT_MIN_SEPARATION = 1.0  # um, clamp below which V saturates

# Quoted beam geometry: 780 nm waists (9, 7) um, 480 nm waists (5.6, 4.7) um.
RED_WAISTS = (9.0, 7.0)
BLUE_WAISTS = (5.6, 4.7)
# One micron transverse misalignment per excitation laser, orthogonal axes.
RED_MISALIGNMENT = (1.0, 0.0)
BLUE_MISALIGNMENT = (0.0, 1.0)


@dataclass(frozen=True)
class PhysicalParams:
    """Scalar physics inputs for one simulated run (rad/us, um, us, uK, kg).

    omega_1 is the calibrated single-atom two-photon Rabi frequency used for
    pulse timing and fits.  The quoted single-photon peaks give a slightly
    different value (2pi*0.648/us vs the calibrated 2pi*0.75/us); when
    omega_1 is set, both peaks are rescaled by a common factor so the
    on-axis two-photon coupling matches the calibration.  Set omega_1=None
    to use the raw peaks unscaled.
    """

    omega_red_peak: float = rad_per_us(160.0)
    omega_blue_peak: float = rad_per_us(17.0)
    delta_intermediate: float = rad_per_us(-2100.0)
    gamma_5p: float = rad_per_us(6.07)
    c6: float = rad_per_us(11.0) * 12.0**6  # calibrated: 2pi*11 MHz at 12 um
    tau_coh: float = 5.0
    lambda_red: float = 0.780
    lambda_blue: float = 0.480
    temperature: float = 125.0
    atom_mass: float = RB87_MASS
    omega_1: float | None = rad_per_us(0.75)

    def __post_init__(self):
        if self.delta_intermediate == 0:
            raise ValueError("delta_intermediate must be nonzero (signed)")
        for name in ("omega_red_peak", "omega_blue_peak", "gamma_5p", "c6",
                     "lambda_red", "lambda_blue", "atom_mass"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.tau_coh <= 0:
            raise ValueError("tau_coh must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if self.omega_1 is not None and self.omega_1 <= 0:
            raise ValueError("omega_1 must be positive when given")

    def raw_two_photon_peak(self) -> float:
        """On-axis two-photon Rabi frequency from the unscaled peaks."""
        return two_photon_rabi(self.omega_red_peak, self.omega_blue_peak,
                               self.delta_intermediate)

    def peak_scale(self) -> float:
        """Common factor applied to both single-photon peaks (see class doc)."""
        if self.omega_1 is None:
            return 1.0
        return math.sqrt(self.omega_1 / self.raw_two_photon_peak())

    def effective_peaks(self) -> tuple[float, float]:
        s = self.peak_scale()
        return s * self.omega_red_peak, s * self.omega_blue_peak

    def calibrated_omega_1(self) -> float:
        """Two-photon Rabi frequency at the beam peak after rescaling."""
        return self.omega_1 if self.omega_1 is not None else self.raw_two_photon_peak()


@dataclass(frozen=True)
class BeamProfile:
    """Gaussian beam with 1/e field-amplitude radii for the Rabi coupling.

    The quoted 1/e^2 intensity waists are used directly as 1/e field radii,
    Omega(x, y) = peak * exp(-x^2/wx^2 - y^2/wy^2); a single documented
    convention keeps fits reproducible.
    """

    waist_x: float
    waist_y: float
    offset_x: float = 0.0
    offset_y: float = 0.0
    peak_rabi: float = 0.0

    def __post_init__(self):
        if self.waist_x <= 0 or self.waist_y <= 0:
            raise ValueError("beam waists must be positive")
        if self.peak_rabi < 0:
            raise ValueError("peak_rabi must be nonnegative")


@dataclass(frozen=True)
class CloudGeometry:
    """Gaussian cloud std devs: z is the trap axis (beam propagation axis)."""

    sigma_x: float = 0.25
    sigma_y: float = 0.25
    sigma_z: float = 3.5

    def __post_init__(self):
        if min(self.sigma_x, self.sigma_y, self.sigma_z) <= 0:
            raise ValueError("cloud sigmas must be positive")


@dataclass(frozen=True)
class AtomConfiguration:
    """One sampled realization; arrays are frozen after creation.

    positions/velocities are (n, 3); rabi_two_photon, detuning_two_photon,
    omega_red, omega_blue are (n,); blockade is the symmetric (n, n)
    interaction matrix with zero diagonal, in rad/us.
    """

    n_atoms: int
    positions: np.ndarray
    velocities: np.ndarray
    rabi_two_photon: np.ndarray
    detuning_two_photon: np.ndarray
    blockade: np.ndarray
    omega_red: np.ndarray = field(default=None)
    omega_blue: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.n_atoms
        if self.positions.shape != (n, 3) or self.velocities.shape != (n, 3):
            raise ValueError("positions/velocities must have shape (n_atoms, 3)")
        for name in ("rabi_two_photon", "detuning_two_photon"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape (n_atoms,)")
        if self.blockade.shape != (n, n):
            raise ValueError("blockade must have shape (n_atoms, n_atoms)")
        if n:
            if not np.allclose(self.blockade, self.blockade.T):
                raise ValueError("blockade matrix must be symmetric")
            if np.any(np.diag(self.blockade) != 0):
                raise ValueError("blockade diagonal must be zero")
            if np.any(self.blockade < 0):
                raise ValueError("blockade shifts must be nonnegative")
            if np.any(self.rabi_two_photon < 0):
                raise ValueError("rabi_two_photon must be nonnegative")
        for arr in (self.positions, self.velocities, self.rabi_two_photon,
                    self.detuning_two_photon, self.blockade,
                    self.omega_red, self.omega_blue):
            if arr is not None:
                arr.setflags(write=False)


def two_photon_rabi(omega_red, omega_blue, delta):
    """Adiabatic-elimination two-photon coupling Omega_r*Omega_b / (2|Delta|)."""
    if np.any(np.asarray(delta) == 0):
        raise ValueError("intermediate-state detuning must be nonzero")
    return omega_red * omega_blue / (2.0 * np.abs(delta))


def beam_rabi_at(beam: BeamProfile, x, y):
    """Local Rabi frequency of a Gaussian beam at transverse position (x, y)."""
    ux = (np.asarray(x, dtype=float) - beam.offset_x) / beam.waist_x
    uy = (np.asarray(y, dtype=float) - beam.offset_y) / beam.waist_y
    return beam.peak_rabi * np.exp(-(ux * ux) - (uy * uy))


def doppler_shift(velocity, lambda_red, lambda_blue):
    """Two-photon Doppler shift for counter-propagating beams, rad/us.

    The red and blue wavevectors point opposite ways along z; the residual
    |k_eff| = 2pi (1/lambda_blue - 1/lambda_red) is what the moving atom sees.
    """
    k_eff = TWO_PI * (1.0 / lambda_red - 1.0 / lambda_blue)
    v = np.asarray(velocity, dtype=float)
    return k_eff * v[..., 2]


def ac_stark_shift(omega_red_i, omega_blue_i, delta):
    """Differential two-photon light shift (w_r^2 - w_b^2) / (4 Delta).

    Both beams shift the two-photon resonance with opposite signs through
    the shared intermediate state.
    """
    if np.any(np.asarray(delta) == 0):
        raise ValueError("intermediate-state detuning must be nonzero")
    omega_red_i = np.asarray(omega_red_i, dtype=float)
    omega_blue_i = np.asarray(omega_blue_i, dtype=float)
    return (omega_red_i**2 - omega_blue_i**2) / (4.0 * delta)


def blockade_shift(r_i, r_j, c6, min_separation=DEFAULT_MIN_SEPARATION):
    """Pairwise interaction c6 / r^6 with a short-range clamp.

    Coincident positions are a domain error; separations below
    min_separation use the clamped value (the r^-6 form is meaningless
    there anyway and would overflow the integrator otherwise).
    """
    d = float(np.linalg.norm(np.asarray(r_i, float) - np.asarray(r_j, float)))
    if d == 0.0:
        raise ValueError("blockade_shift: coincident atom positions")
    return c6 / max(d, min_separation) ** 6


def scattering_rate(omega_red_i, delta, gamma_5p):
    """Photon scattering rate of the far-detuned lower leg, gamma W^2/(4 D^2).

    This is the ab-initio intermediate-state rate; the default dynamics
    uses the coherence-time-calibrated rate instead (see protocol module).
    """
    if np.any(np.asarray(delta) == 0):
        raise ValueError("intermediate-state detuning must be nonzero")
    return gamma_5p * np.asarray(omega_red_i, float) ** 2 / (4.0 * delta**2)


def default_beams(params: PhysicalParams, misaligned: bool = True):
    """(red, blue) BeamProfile pair with quoted waists and calibrated peaks."""
    red_peak, blue_peak = params.effective_peaks()
    red_off = RED_MISALIGNMENT if misaligned else (0.0, 0.0)
    blue_off = BLUE_MISALIGNMENT if misaligned else (0.0, 0.0)
    red = BeamProfile(RED_WAISTS[0], RED_WAISTS[1], red_off[0], red_off[1], red_peak)
    blue = BeamProfile(BLUE_WAISTS[0], BLUE_WAISTS[1], blue_off[0], blue_off[1], blue_peak)
    return red, blue


def sample_cloud(geom: CloudGeometry, params: PhysicalParams, n_atoms: int,
                 seed, beams=None, include_doppler=True, include_ac_stark=True,
                 min_separation=DEFAULT_MIN_SEPARATION) -> AtomConfiguration:
    """Sample one atom configuration; pure function of its arguments.

    Positions are i.i.d. Gaussian per axis, velocities Maxwell-Boltzmann at
    params.temperature.  Per-atom couplings come from the local beam
    amplitudes; detunings are Doppler plus the light shift relative to an
    atom at the cloud centre.  Identical seed gives bit-identical output.
    """
    if n_atoms < 0:
        raise ValueError("n_atoms must be nonnegative")
    rng = np.random.Generator(np.random.PCG64(seed))
    sig = np.array([geom.sigma_x, geom.sigma_y, geom.sigma_z])
    positions = rng.normal(0.0, 1.0, size=(n_atoms, 3)) * sig
    sigma_v = thermal_velocity_sigma(params.temperature, params.atom_mass)
    velocities = rng.normal(0.0, 1.0, size=(n_atoms, 3)) * sigma_v

    if beams is None:
        beams = default_beams(params)
    red, blue = beams

    omega_red_i = beam_rabi_at(red, positions[:, 0], positions[:, 1])
    omega_blue_i = beam_rabi_at(blue, positions[:, 0], positions[:, 1])
    rabi = two_photon_rabi(omega_red_i, omega_blue_i, params.delta_intermediate)

    detuning = np.zeros(n_atoms)
    if include_doppler and n_atoms:
        detuning = detuning + doppler_shift(velocities, params.lambda_red,
                                            params.lambda_blue)
    if include_ac_stark and n_atoms:
        shift = ac_stark_shift(omega_red_i, omega_blue_i, params.delta_intermediate)
        ref = ac_stark_shift(beam_rabi_at(red, 0.0, 0.0),
                             beam_rabi_at(blue, 0.0, 0.0),
                             params.delta_intermediate)
        detuning = detuning + (shift - ref)

    blockade = np.zeros((n_atoms, n_atoms))
    if n_atoms > 1:
        diff = positions[:, None, :] - positions[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        np.fill_diagonal(dist, np.inf)
        if np.any(dist == 0.0):
            raise ValueError("sampled coincident atom positions")
        dist = np.maximum(dist, min_separation)
        blockade = params.c6 / dist**6
        np.fill_diagonal(blockade, 0.0)

    return AtomConfiguration(
        n_atoms=n_atoms,
        positions=positions,
        velocities=velocities,
        rabi_two_photon=np.asarray(rabi, dtype=float).reshape(n_atoms),
        detuning_two_photon=detuning,
        blockade=blockade,
        omega_red=np.asarray(omega_red_i, dtype=float).reshape(n_atoms),
        omega_blue=np.asarray(omega_blue_i, dtype=float).reshape(n_atoms),
    )
