"""Truncated many-atom basis, sparse Hamiltonians, and propagators.

Each atom carries a label in {a, b, r}.  The basis keeps every label string
with at most r_max simultaneous Rydberg excitations and b_max transferred
atoms, ordered lexicographically (a < b < r).  A drive couples one ground
label to r; the interaction is diagonal, acting on r-r pairs.

Propagation is exact per pulse (the Hamiltonian is piecewise constant):
a dense eigendecomposition absorbs the stiff r^-6 diagonal without any
step-size constraint.  Quantum jumps are unraveled on a time grid with a
symmetric split of the anti-Hermitian decay term; jump operators are
projectors onto the driven ground label of one atom (dephasing-type).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp

from .ensemble import AtomConfiguration

LABELS = "abr"
CODE_A, CODE_B, CODE_R = 0, 1, 2
GROUND_CODE = {"A": CODE_A, "B": CODE_B}

DEFAULT_BASIS_CAP = 1_000_000
DEFAULT_DENSE_CAP = 4096
NORM_JUMP_LIMIT = 0.10  # max allowed norm-squared drop per trajectory step


class ResourceLimitError(RuntimeError):
    """Requested problem size exceeds a configured cap."""


class StepSizeError(RuntimeError):
    """Trajectory step lost too much norm; reduce dt."""


def basis_size(n_atoms: int, r_max: int, b_max: int) -> int:
    total = 0
    for nr in range(min(r_max, n_atoms) + 1):
        rest = n_atoms - nr
        total += math.comb(n_atoms, nr) * sum(
            math.comb(rest, nb) for nb in range(min(b_max, rest) + 1))
    return total


@dataclass(frozen=True)
class Basis:
    """Ordered truncated label-string basis with exact index lookup."""

    n_atoms: int
    r_max: int
    b_max: int
    labels: np.ndarray  # (size, n_atoms) uint8 codes, lexicographically sorted

    def __post_init__(self):
        self.labels.setflags(write=False)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def size(self):
        return self.labels.shape[0]

    @property
    def states(self):
        """Label strings in basis order (built on first use)."""
        cached = self.__dict__.get("_states")
        if cached is None:
            lut = np.frombuffer(LABELS.encode(), dtype=np.uint8)
            cached = [bytes(row).decode() for row in lut[self.labels]]
            self.__dict__["_states"] = cached
        return cached

    def index(self, state) -> int:
        """Ordinal of a label string (or code sequence)."""
        table = self.__dict__.get("_index")
        if table is None:
            table = {s: k for k, s in enumerate(self.states)}
            self.__dict__["_index"] = table
        if not isinstance(state, str):
            state = "".join(LABELS[c] for c in state)
        return table[state]

    def n_r(self):
        return (self.labels == CODE_R).sum(axis=1)

    def n_b(self):
        return (self.labels == CODE_B).sum(axis=1)


def enumerate_basis(n_atoms: int, r_max: int = 2, b_max: int = 2,
                    max_states: int = DEFAULT_BASIS_CAP) -> Basis:
    """All label strings with #r <= r_max and #b <= b_max, lex order."""
    if n_atoms < 1:
        raise ValueError("n_atoms must be >= 1")
    if r_max < 0 or b_max < 0:
        raise ValueError("r_max and b_max must be nonnegative")
    size = basis_size(n_atoms, r_max, b_max)
    if size > max_states:
        raise ResourceLimitError(
            f"basis of {size} states exceeds cap {max_states}")

    blocks = []
    for nr in range(min(r_max, n_atoms) + 1):
        r_list = list(combinations(range(n_atoms), nr))
        r_sets = np.array(r_list, dtype=np.intp).reshape(len(r_list), nr)
        for rpos in r_sets:
            rest = np.setdiff1d(np.arange(n_atoms), rpos, assume_unique=True)
            for nb in range(min(b_max, n_atoms - nr) + 1):
                b_list = list(combinations(rest, nb))
                b_sets = np.array(b_list, dtype=np.intp).reshape(len(b_list), nb)
                rows = np.zeros((len(b_sets), n_atoms), dtype=np.uint8)
                if nr:
                    rows[:, rpos] = CODE_R
                if nb:
                    rows[np.arange(len(b_sets))[:, None], b_sets] = CODE_B
                blocks.append(rows)
    labels = np.vstack(blocks) if blocks else np.zeros((0, n_atoms), np.uint8)
    order = np.lexsort(labels.T[::-1])
    return Basis(n_atoms=n_atoms, r_max=r_max, b_max=b_max, labels=labels[order])


@dataclass
class StateVector:
    basis: Basis
    amplitudes: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex)
        if self.amplitudes.shape != (self.basis.size,):
            raise ValueError("amplitude length must match basis size")

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "StateVector":
        return StateVector(self.basis, self.amplitudes / self.norm())

    def populations(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    @classmethod
    def ground(cls, basis: Basis) -> "StateVector":
        # all-a string is lexicographically first
        amps = np.zeros(basis.size, dtype=complex)
        amps[0] = 1.0
        return cls(basis, amps)

    @classmethod
    def from_label(cls, basis: Basis, label: str) -> "StateVector":
        amps = np.zeros(basis.size, dtype=complex)
        amps[basis.index(label)] = 1.0
        return cls(basis, amps)


def make_w_state(basis: Basis) -> StateVector:
    """Equal superposition of all single-r strings with the rest in a."""
    if basis.r_max < 1:
        raise ValueError("basis must allow at least one Rydberg excitation")
    mask = (basis.n_r() == 1) & (basis.n_b() == 0)
    idx = np.nonzero(mask)[0]
    amps = np.zeros(basis.size, dtype=complex)
    amps[idx] = 1.0 / math.sqrt(len(idx))
    return StateVector(basis, amps)


@dataclass(frozen=True)
class DriveSpec:
    """One square pulse: channel selects which ground label couples to r."""

    channel: str
    duration: float
    global_detuning: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if self.channel not in GROUND_CODE:
            raise ValueError("channel must be 'A' or 'B'")
        if self.duration < 0:
            raise ValueError("duration must be nonnegative")

    @property
    def ground_code(self) -> int:
        return GROUND_CODE[self.channel]


@dataclass
class SparseHamiltonian:
    basis: Basis
    drive: DriveSpec
    matrix: sp.csr_matrix  # Hermitian, rad/us

    @property
    def dim(self):
        return self.matrix.shape[0]

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()


def build_hamiltonian(config: AtomConfiguration, basis: Basis,
                      drive: DriveSpec) -> SparseHamiltonian:
    """H = sum_i (W_i/2)(e^{i phi}|g_i><r_i| + h.c.) + sum_i (d_i + D)|r_i><r_i|
    + sum_{i<j} V_ij P(r_i r_j), with g the drive channel's ground label."""
    if basis.n_atoms != config.n_atoms:
        raise ValueError("basis and configuration atom counts differ")
    labels = basis.labels
    n, dim = basis.n_atoms, basis.size
    g = drive.ground_code

    r_mask = labels == CODE_R
    delta = config.detuning_two_photon + drive.global_detuning
    diag = r_mask @ delta
    if n > 1:
        rf = r_mask.astype(float)
        diag = diag + 0.5 * np.einsum("si,ij,sj->s", rf, config.blockade, rf)

    # couplings: states differing in exactly one atom between g and r
    keys = np.ascontiguousarray(labels).view(
        np.dtype((np.void, labels.shape[1]))).ravel()
    rows, cols, slots = [], [], []
    n_r = basis.n_r()
    for i in range(n):
        src = np.nonzero((labels[:, i] == g) & (n_r < basis.r_max))[0]
        if not len(src):
            continue
        partner = labels[src].copy()
        partner[:, i] = CODE_R
        pkeys = np.ascontiguousarray(partner).view(
            np.dtype((np.void, partner.shape[1]))).ravel()
        loc = np.searchsorted(keys, pkeys)
        ok = (loc < dim)
        loc = np.where(ok, loc, 0)
        ok &= keys[loc] == pkeys
        rows.append(src[ok])
        cols.append(loc[ok])
        slots.append(np.full(ok.sum(), i))
    if rows:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        slots = np.concatenate(slots)
        vals = 0.5 * config.rabi_two_photon[slots] * np.exp(1j * drive.phase)
        data = np.concatenate([vals, np.conj(vals), diag.astype(complex)])
        ii = np.concatenate([rows, cols, np.arange(dim)])
        jj = np.concatenate([cols, rows, np.arange(dim)])
    else:
        data = diag.astype(complex)
        ii = jj = np.arange(dim)
    h = sp.coo_matrix((data, (ii, jj)), shape=(dim, dim)).tocsr()
    return SparseHamiltonian(basis=basis, drive=drive, matrix=h)


def propagate_exact(psi: StateVector, h: SparseHamiltonian, t: float,
                    dense_cap: int = DEFAULT_DENSE_CAP) -> StateVector:
    """psi(t) = exp(-iHt) psi by dense eigendecomposition."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if h.dim > dense_cap:
        raise ResourceLimitError(
            f"dense propagation of {h.dim} states exceeds cap {dense_cap}")
    w, v = np.linalg.eigh(h.to_dense())
    amps = v @ (np.exp(-1j * w * t) * (v.conj().T @ psi.amplitudes))
    return StateVector(psi.basis, amps)


def _ground_masks(basis: Basis, ground_code: int):
    """(dim, n) bool: atom i in the driven ground label, per state."""
    return basis.labels == ground_code


def propagate_trajectory(psi: StateVector, h: SparseHamiltonian,
                         jump_rates, t: float, dt: float, rng,
                         dense_cap: int = DEFAULT_DENSE_CAP):
    """One quantum-jump trajectory under H_eff = H - (i/2) sum_i G_i P_i.

    P_i projects atom i onto the driven ground label.  Each step evolves
    exactly under H, applies the no-jump decay symmetrically, and compares
    the norm loss against a uniform draw (one draw per step).  Returns the
    final normalized state and the jump log [(time, atom), ...].
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t < 0:
        raise ValueError("t must be nonnegative")
    if h.dim > dense_cap:
        raise ResourceLimitError(
            f"dense trajectory of {h.dim} states exceeds cap {dense_cap}")
    rates = np.asarray(jump_rates, dtype=float)
    if rates.shape != (psi.basis.n_atoms,):
        raise ValueError("jump_rates must have one entry per atom")
    if np.any(rates < 0):
        raise ValueError("jump rates must be nonnegative")

    w, v = np.linalg.eigh(h.to_dense())
    vh = v.conj().T
    masks = _ground_masks(psi.basis, h.drive.ground_code)
    gamma_state = masks @ rates  # total decay rate per basis state

    amps = psi.amplitudes.copy()
    nrm = np.linalg.norm(amps)
    if nrm == 0:
        raise ValueError("cannot propagate a zero state")
    amps /= nrm

    jumps = []
    n_steps = int(math.ceil(t / dt - 1e-12)) if t > 0 else 0
    elapsed = 0.0
    for k in range(n_steps):
        step = min(dt, t - elapsed)
        half = np.exp(-0.25 * gamma_state * step)
        amps_t = half * (v @ (np.exp(-1j * w * step) * (vh @ (half * amps))))
        norm2 = float(np.real(np.vdot(amps_t, amps_t)))
        dp = 1.0 - norm2
        if dp > NORM_JUMP_LIMIT:
            raise StepSizeError(
                f"norm dropped by {dp:.3f} in one step; reduce dt")
        u = rng.random()
        if u < dp:
            probs = np.abs(amps_t) ** 2
            weights = rates * (probs @ masks)
            total = weights.sum()
            cum = np.cumsum(weights)
            atom = int(np.searchsorted(cum, rng.random() * total))
            amps = np.where(masks[:, atom], amps_t, 0.0)
            amps /= np.linalg.norm(amps)
            jumps.append((elapsed + step, atom))
        else:
            amps = amps_t / math.sqrt(norm2)
        elapsed += step
    return StateVector(psi.basis, amps), jumps


def trajectory_ensemble_populations(h: SparseHamiltonian, jump_rates,
                                    times, n_traj: int, seed,
                                    psi0: StateVector | None = None,
                                    dt: float = 0.01) -> np.ndarray:
    """Mean basis-state populations over n_traj jump trajectories.

    Vectorized over trajectories (columns); one shared RNG stream with a
    fixed draw order, so results are deterministic for a given seed.
    Returns an array of shape (len(times), basis size).
    """
    basis = h.basis
    if psi0 is None:
        psi0 = StateVector.ground(basis)
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("times must be nondecreasing and nonnegative")
    rates = np.asarray(jump_rates, dtype=float)
    masks = _ground_masks(basis, h.drive.ground_code)
    gamma_state = masks @ rates

    w, v = np.linalg.eigh(h.to_dense())
    vh = v.conj().T
    rng = np.random.Generator(np.random.PCG64(seed))

    amps = np.repeat(psi0.normalized().amplitudes[:, None], n_traj, axis=1)
    out = np.empty((len(times), basis.size))
    t_now = 0.0
    for j, t_target in enumerate(times):
        while t_target - t_now > 1e-12:
            step = min(dt, t_target - t_now)
            half = np.exp(-0.25 * gamma_state * step)[:, None]
            amps = half * (v @ (np.exp(-1j * w * step)[:, None] * (vh @ (half * amps))))
            norm2 = np.einsum("st,st->t", np.abs(amps), np.abs(amps))
            dp = 1.0 - norm2
            u = rng.random(n_traj)
            hit = np.nonzero(u < dp)[0]
            for col in hit:
                probs = np.abs(amps[:, col]) ** 2
                weights = rates * (probs @ masks)
                cum = np.cumsum(weights)
                atom = int(np.searchsorted(cum, rng.random() * cum[-1]))
                amps[:, col] = np.where(masks[:, atom], amps[:, col], 0.0)
                amps[:, col] /= np.linalg.norm(amps[:, col])
            keep = np.setdiff1d(np.arange(n_traj), hit, assume_unique=True)
            amps[:, keep] /= np.sqrt(norm2[keep])
            t_now += step
        out[j] = (np.abs(amps) ** 2).mean(axis=1)
    return out


def lindblad_populations(h: SparseHamiltonian, jump_rates, times,
                         psi0: StateVector | None = None,
                         max_dim: int = 128) -> np.ndarray:
    """Dense master-equation oracle for small bases (validation only).

    Integrates rho' = -i[H, rho] + sum_i G_i (P_i rho P_i - {P_i, rho}/2)
    and returns diagonal populations at the requested times.
    """
    basis = h.basis
    dim = basis.size
    if dim > max_dim:
        raise ResourceLimitError(
            f"Lindblad oracle limited to {max_dim} states, got {dim}")
    if psi0 is None:
        psi0 = StateVector.ground(basis)
    rates = np.asarray(jump_rates, dtype=float)
    masks = _ground_masks(basis, h.drive.ground_code).astype(float)
    hmat = h.to_dense()
    projectors = [np.diag(masks[:, i]) for i in range(basis.n_atoms)]

    def rhs(_t, y):
        rho = y.reshape(dim, dim)
        drho = -1j * (hmat @ rho - rho @ hmat)
        for gi, p in zip(rates, projectors):
            if gi == 0:
                continue
            prp = p @ rho @ p
            anti = p @ rho + rho @ p
            drho = drho + gi * (prp - 0.5 * anti)
        return drho.ravel()

    a0 = psi0.normalized().amplitudes
    rho0 = np.outer(a0, a0.conj()).ravel()
    times = np.asarray(times, dtype=float)
    sol = solve_ivp(rhs, (0.0, float(times[-1])), rho0, t_eval=times,
                    rtol=1e-9, atol=1e-11)
    if not sol.success:
        raise RuntimeError(f"Lindblad integration failed: {sol.message}")
    rho_t = sol.y.T.reshape(len(times), dim, dim)
    return np.real(np.einsum("tii->ti", rho_t))
