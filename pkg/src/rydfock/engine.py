"""Fast pulse propagation by spectator-sector decomposition.

A drive on channel X couples only {X-ground, r} labels; atoms sitting in
the other ground label are frozen spectators.  The Hamiltonian is therefore
block diagonal over spectator patterns, and every block with the same
spectator count has identical dimension and sparsity pattern, so blocks are
assembled and diagonalized in stacks.  Evolution within a pulse is exact
(piecewise-constant H, eigendecomposition per block); the stiff r^-6
diagonal costs nothing.

Quantum jumps use the same scheme as dynamics.propagate_trajectory: a
uniform time grid, symmetric split of the no-jump decay, one uniform draw
per step and column, projector jumps onto the driven ground label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations

import numpy as np

from .dynamics import CODE_B, CODE_R, Basis, DriveSpec, enumerate_basis

# Keep stacked blocks below ~300 MB regardless of group counts.
_CHUNK_COMPLEX_BUDGET = 2 * 10**7
_CLASS_PROB_FLOOR = 1e-28


@dataclass(frozen=True)
class EngineOptions:
    jump_target_prob: float = 0.08  # max expected jump probability per step
    min_steps: int = 4


@lru_cache(maxsize=16)
def cached_basis(n_atoms: int, r_max: int, b_max: int) -> Basis:
    return enumerate_basis(n_atoms, r_max, b_max)


@lru_cache(maxsize=64)
def _free_pattern(k: int, r_max: int, ground_cap: int | None):
    """Sub-basis structure for k driven atoms over {ground, r}.

    Returns (sub_labels, r_mask, coup_rows, coup_cols, coup_slots,
    pair_entry_mat, pair_si, pair_sj) with sub_labels lexicographic
    (ground < r), matching the global ordering within a sector.
    """
    rows = []
    for nr in range(min(r_max, k) + 1):
        if ground_cap is not None and k - nr > ground_cap:
            continue
        for rpos in combinations(range(k), nr):
            s = np.zeros(k, dtype=np.uint8)
            s[list(rpos)] = 1
            rows.append(s)
    sub = np.array(rows, dtype=np.uint8).reshape(len(rows), k)
    order = np.lexsort(sub.T[::-1]) if k else np.arange(len(rows))
    sub = sub[order]
    d = sub.shape[0]
    index = {bytes(row): i for i, row in enumerate(sub)}

    coup_rows, coup_cols, coup_slots = [], [], []
    pair_rows, pair_si, pair_sj = [], [], []
    for i, s in enumerate(sub):
        r_slots = np.nonzero(s == 1)[0]
        for a, bslot in combinations(r_slots.tolist(), 2):
            pair_rows.append(i)
            pair_si.append(a)
            pair_sj.append(bslot)
        if len(r_slots) >= r_max:
            continue
        for slot in np.nonzero(s == 0)[0]:
            t = s.copy()
            t[slot] = 1
            j = index.get(bytes(t))
            if j is not None:
                coup_rows.append(i)
                coup_cols.append(j)
                coup_slots.append(slot)
    n_pairs = len(pair_rows)
    entry_mat = np.zeros((d, n_pairs))
    entry_mat[pair_rows, np.arange(n_pairs)] = 1.0
    return (sub, sub == 1,
            np.array(coup_rows, dtype=np.intp),
            np.array(coup_cols, dtype=np.intp),
            np.array(coup_slots, dtype=np.intp),
            entry_mat,
            np.array(pair_si, dtype=np.intp),
            np.array(pair_sj, dtype=np.intp))


@dataclass(frozen=True)
class _SectorClass:
    m: int                 # spectator count
    start: int             # slice of the sorted state ordering
    end: int
    n_groups: int
    dim: int
    free_atoms: np.ndarray  # (n_groups, k) atom ids driven in this class
    pattern: tuple


@dataclass(frozen=True)
class ChannelPlan:
    """Sorted-state layout of one basis for one drive channel."""

    channel: str
    order: np.ndarray          # basis index -> position when sorted by sector
    inverse: np.ndarray
    ground_mask: np.ndarray    # (dim, n) bool in SORTED order
    classes: tuple

    @property
    def dim(self):
        return self.order.shape[0]


def _popcount_rows(mask):
    return mask.sum(axis=1)


@lru_cache(maxsize=32)
def channel_plan(n_atoms: int, r_max: int, b_max: int, channel: str) -> ChannelPlan:
    basis = cached_basis(n_atoms, r_max, b_max)
    labels = basis.labels
    n = n_atoms
    ground = 0 if channel == "A" else CODE_B
    spectator = CODE_B if channel == "A" else 0
    ground_cap = b_max if channel == "B" else None

    spect = labels == spectator
    keys = (spect * (np.uint64(1) << np.arange(n, dtype=np.uint64))).sum(
        axis=1, dtype=np.uint64)
    m = _popcount_rows(spect)
    order = np.lexsort((keys, m))
    sorted_keys = keys[order]
    sorted_m = m[order]

    classes = []
    pos = 0
    dim = labels.shape[0]
    while pos < dim:
        mc = int(sorted_m[pos])
        end_m = pos + int(np.searchsorted(sorted_m[pos:], mc, side="right"))
        k = n - mc
        pattern = _free_pattern(k, r_max, ground_cap)
        d = pattern[0].shape[0]
        count = end_m - pos
        if count % d:
            raise AssertionError("sector dimensions inconsistent")
        g_count = count // d
        block_keys = sorted_keys[pos:end_m].reshape(g_count, d)
        if np.any(block_keys != block_keys[:, :1]):
            raise AssertionError("sector grouping misaligned")
        bits = ((block_keys[:, 0][:, None] >> np.arange(n, dtype=np.uint64))
                & np.uint64(1)).astype(bool)
        free_atoms = np.nonzero(~bits)[1].reshape(g_count, k)
        classes.append(_SectorClass(m=mc, start=pos, end=end_m,
                                    n_groups=g_count, dim=d,
                                    free_atoms=free_atoms, pattern=pattern))
        pos = end_m

    inverse = np.empty_like(order)
    inverse[order] = np.arange(dim)
    return ChannelPlan(channel=channel, order=order, inverse=inverse,
                       ground_mask=(labels[order] == ground),
                       classes=tuple(classes))


class PulseOperator:
    """Eigendecomposed drive Hamiltonian for one configuration and channel.

    Sector blocks are assembled and diagonalized lazily, only for sectors
    that actually hold amplitude when a pulse runs.
    """

    def __init__(self, plan: ChannelPlan, rabi, detuning, blockade,
                 global_detuning=0.0, phase=0.0):
        self.plan = plan
        self.rabi = np.asarray(rabi, dtype=float)
        self.detuning = np.asarray(detuning, dtype=float) + global_detuning
        self.blockade = np.asarray(blockade, dtype=float)
        self.phase = phase
        self._eigs = {}  # class index -> list of (group slice, w, V)

    def _assemble(self, ci: int):
        cls = self.plan.classes[ci]
        (sub, r_mask, c_rows, c_cols, c_slots, entry_mat,
         pair_si, pair_sj) = cls.pattern
        g_total, d, k = cls.n_groups, cls.dim, cls.free_atoms.shape[1]
        chunk = max(1, _CHUNK_COMPLEX_BUDGET // max(d * d, 1))
        blocks = []
        phase_fac = np.exp(1j * self.phase)
        for g0 in range(0, g_total, chunk):
            g1 = min(g0 + chunk, g_total)
            atoms = cls.free_atoms[g0:g1]
            ng = g1 - g0
            h = np.zeros((ng, d, d), dtype=complex)
            if d and k:
                delta_g = self.detuning[atoms]
                diag = r_mask.astype(float) @ delta_g.T  # (d, ng)
                if len(pair_si):
                    v_g = self.blockade[atoms[:, pair_si], atoms[:, pair_sj]]
                    diag = diag + entry_mat @ v_g.T
                h[:, np.arange(d), np.arange(d)] = diag.T
                if len(c_rows):
                    vals = 0.5 * self.rabi[atoms][:, c_slots] * phase_fac
                    h[:, c_rows, c_cols] = vals
                    h[:, c_cols, c_rows] = np.conj(vals)
            w, v = np.linalg.eigh(h)
            blocks.append((slice(g0, g1), w, v))
        self._eigs[ci] = blocks
        return blocks

    def blocks(self, ci: int):
        return self._eigs.get(ci) or self._assemble(ci)

    def active_classes(self, amps_sorted):
        out = []
        for ci, cls in enumerate(self.plan.classes):
            seg = amps_sorted[cls.start:cls.end]
            if np.any(np.abs(seg) ** 2 > _CLASS_PROB_FLOOR):
                out.append(ci)
        return out

    def evolve(self, amps_sorted, t, active=None):
        """In-place exact evolution of sorted amplitudes (dim, S) by time t."""
        if active is None:
            active = self.active_classes(amps_sorted)
        for ci in active:
            cls = self.plan.classes[ci]
            seg = amps_sorted[cls.start:cls.end]
            s_cols = seg.shape[1]
            psi = seg.reshape(cls.n_groups, cls.dim, s_cols)
            for sl, w, v in self.blocks(ci):
                ph = np.exp(-1j * w * t)[..., None]
                psi[sl] = v @ (ph * (np.conj(np.swapaxes(v, 1, 2)) @ psi[sl]))


class SequenceEngine:
    """Holds the evolving state (basis order) for one sampled configuration."""

    def __init__(self, basis: Basis, rabi, detuning, blockade, jump_rates,
                 options: EngineOptions = EngineOptions()):
        self.basis = basis
        self.rabi = np.asarray(rabi, dtype=float)
        self.detuning = np.asarray(detuning, dtype=float)
        self.blockade = np.asarray(blockade, dtype=float)
        self.jump_rates = np.asarray(jump_rates, dtype=float)
        self.options = options
        amps = np.zeros((basis.size, 1), dtype=complex)
        amps[0, 0] = 1.0  # all atoms in a
        self.amps = amps
        self._operators = {}

    @property
    def n_columns(self):
        return self.amps.shape[1]

    def probabilities(self):
        """(S, dim) outcome probabilities per column, basis order."""
        return (np.abs(self.amps) ** 2).T

    def _operator(self, drive: DriveSpec) -> PulseOperator:
        key = (drive.channel, drive.global_detuning, drive.phase)
        op = self._operators.get(key)
        if op is None:
            plan = channel_plan(self.basis.n_atoms, self.basis.r_max,
                                self.basis.b_max, drive.channel)
            op = PulseOperator(plan, self.rabi, self.detuning, self.blockade,
                               drive.global_detuning, drive.phase)
            self._operators[key] = op
        return op

    def pulse(self, drive: DriveSpec, rng, snapshot_times=None):
        """Run one square pulse over all columns, with jumps if rates are set.

        With snapshot_times (requires a single column), the state is
        replaced by one column per requested time, sampled along a single
        stochastic record; marginals at each time are unbiased.
        """
        op = self._operator(drive)
        plan = op.plan
        sorted_amps = self.amps[plan.order]
        has_jumps = bool(np.any(self.jump_rates > 0))

        if snapshot_times is not None:
            times = np.asarray(snapshot_times, dtype=float)
            if self.n_columns != 1:
                raise ValueError("snapshots require a single-column state")
            if np.any(times < 0) or np.any(np.diff(times) < 0):
                raise ValueError("snapshot times must be sorted, nonnegative")
        else:
            times = None

        if not has_jumps:
            if times is None:
                if drive.duration > 0:
                    op.evolve(sorted_amps, drive.duration)
            else:
                active = op.active_classes(sorted_amps)
                cols = []
                for t in times:
                    col = sorted_amps.copy()
                    if t > 0:
                        op.evolve(col, t, active=active)
                    cols.append(col[:, 0])
                sorted_amps = np.stack(cols, axis=1)
        else:
            sorted_amps = self._pulse_with_jumps(op, sorted_amps, drive, rng,
                                                 times)

        self.amps = sorted_amps[plan.inverse]

    def _pulse_with_jumps(self, op, sorted_amps, drive, rng, times):
        plan = op.plan
        duration = float(drive.duration) if times is None else float(times[-1])
        record = times is not None
        active = op.active_classes(sorted_amps)
        gamma = plan.ground_mask @ self.jump_rates
        g_active = 0.0
        for ci in active:
            cls = plan.classes[ci]
            seg = gamma[cls.start:cls.end]
            if seg.size:
                g_active = max(g_active, float(seg.max()))
        # a jump can only move amplitude within a class, so `active` is fixed
        if duration <= 0:
            if record:
                return np.repeat(sorted_amps, len(times), axis=1)
            return sorted_amps

        n_steps = max(self.options.min_steps,
                      int(math.ceil(duration * g_active /
                                    self.options.jump_target_prob)))
        grid = np.linspace(0.0, duration, n_steps + 1)
        if record:
            # align the grid with the snapshot times
            grid = np.unique(np.concatenate([grid, times]))
        half = np.exp(-0.25 * gamma)[:, None]
        out_cols = []
        if record and times[0] == 0.0:
            out_cols.append(sorted_amps[:, 0].copy())

        amps = sorted_amps
        n_cols = amps.shape[1]
        for i in range(len(grid) - 1):
            dt = grid[i + 1] - grid[i]
            if dt <= 0:
                continue
            decay = half ** dt
            amps *= decay
            op.evolve(amps, dt, active=active)
            amps *= decay
            norm2 = np.einsum("dc,dc->c", amps.real, amps.real) + \
                np.einsum("dc,dc->c", amps.imag, amps.imag)
            dp = 1.0 - norm2
            u = rng.random(n_cols)
            hit = np.nonzero(u < dp)[0]
            for col in hit:
                probs = np.abs(amps[:, col]) ** 2
                weights = self.jump_rates * (probs @ plan.ground_mask)
                cum = np.cumsum(weights)
                atom = int(np.searchsorted(cum, rng.random() * cum[-1]))
                amps[:, col] = np.where(plan.ground_mask[:, atom],
                                        amps[:, col], 0.0)
                amps[:, col] /= np.linalg.norm(amps[:, col])
            if len(hit) < n_cols:
                keep = np.ones(n_cols, dtype=bool)
                keep[hit] = False
                amps[:, keep] /= np.sqrt(norm2[keep])
            if record and np.any(np.isclose(times, grid[i + 1], atol=1e-12)):
                for _ in np.nonzero(np.isclose(times, grid[i + 1],
                                               atol=1e-12))[0]:
                    out_cols.append(amps[:, 0].copy())
        if record:
            return np.stack(out_cols, axis=1)
        return amps

    def project_columns(self, keep_mask):
        """Zero amplitudes outside keep_mask (dim,) for every column, renormalize."""
        self.amps = self.amps * keep_mask[:, None]
        norms = np.linalg.norm(self.amps, axis=0)
        if np.any(norms == 0):
            raise ValueError("projection annihilated a column")
        self.amps = self.amps / norms
