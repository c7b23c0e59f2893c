"""Fock-state pulse programs over sampled ensembles.

A sequence is a list of steps: square pulses on the A or B channel,
FORT restores (which eject Rydberg population and cost recapture losses),
the state-selective blow-away, and detection.  One trajectory draws the
atom number, samples a cloud realization, propagates the pulses with
quantum jumps, collapses projectively, and applies the measurement model.

Measurement bookkeeping: atoms left in r when the trap returns are lost;
surviving atoms are recaptured only if their ballistic flight stayed inside
the effective trap radius on every axis; blow-away removes each surviving
a-atom with the ejection fidelity, and the rare survivors are counted as
undetected (they are not mistaken for b).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .config import ExperimentConfig
from .dynamics import CODE_B, CODE_R, DriveSpec
from .engine import EngineOptions, SequenceEngine, cached_basis
from .ensemble import sample_cloud, scattering_rate
from .units import RB87_MASS, thermal_velocity_sigma

WORKERS_ENV = "RYDFOCK_WORKERS"


# ---------------------------------------------------------------------------
# timing and number statistics

def collective_pi_time(n_bar: float, omega_1: float) -> float:
    """Duration of a collective pi pulse, pi / (sqrt(n_bar) * omega_1)."""
    if n_bar <= 0 or omega_1 <= 0:
        raise ValueError("collective_pi_time needs positive n_bar and omega_1")
    return math.pi / (math.sqrt(n_bar) * omega_1)


def default_n_max(n_bar: float) -> int:
    """Poisson truncation keeping tail mass below ~1e-8."""
    return int(math.ceil(n_bar + 6.0 * math.sqrt(n_bar) + 5.0))


def draw_atom_number(n_bar: float, n_max: int, rng) -> int:
    """Poisson(n_bar) draw clipped at n_max."""
    if n_bar < 0:
        raise ValueError("n_bar must be nonnegative")
    if n_bar == 0:
        return 0
    return int(min(rng.poisson(n_bar), n_max))


def recapture_probability(drop_time: float, temperature: float,
                          trap_radius: float,
                          atom_mass: float = RB87_MASS) -> float:
    """Probability a thermal atom's ballistic flight stays inside the trap.

    Gaussian velocity per axis; the atom is recaptured when |v_ax| * t is
    within trap_radius on every axis, giving an error-function product.
    """
    if drop_time < 0:
        raise ValueError("drop_time must be nonnegative")
    if drop_time == 0:
        return 1.0
    sigma_v = thermal_velocity_sigma(temperature, atom_mass)
    arg = trap_radius / (math.sqrt(2.0) * sigma_v * drop_time)
    return math.erf(arg) ** 3


def tune_trap_radius(t_long: float, t_short: float, target_yield_ratio: float,
                     temperature: float, atom_mass: float = RB87_MASS) -> float:
    """Effective radius making the two-atom yield ratio between two drop
    times equal target_yield_ratio (yield scales as recapture^2)."""

    def gap(radius):
        num = recapture_probability(t_long, temperature, radius, atom_mass)
        den = recapture_probability(t_short, temperature, radius, atom_mass)
        return (num / den) ** 2 - target_yield_ratio

    return brentq(gap, 1e-3, 1e3, xtol=1e-10)


# ---------------------------------------------------------------------------
# sequence specification

@dataclass(frozen=True)
class PulseStep:
    """One square pulse; duration either explicit (us) or a collective-pi
    area referencing the mean atom number ('nbar', 'nbar-1', or a number)."""

    name: str
    channel: str
    duration: float | None = None
    collective_pi: object = None
    global_detuning: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if (self.duration is None) == (self.collective_pi is None):
            raise ValueError(f"pulse {self.name}: set exactly one of "
                             "duration / collective_pi")
        if self.duration is not None and self.duration < 0:
            raise ValueError(f"pulse {self.name}: duration must be >= 0")

    def resolve_duration(self, n_bar: float, omega_1: float) -> float:
        if self.duration is not None:
            return self.duration
        spec = self.collective_pi
        if spec == "nbar":
            n = n_bar
        elif spec == "nbar-1":
            n = n_bar - 1.0
        else:
            n = float(spec)
        return collective_pi_time(n, omega_1)


@dataclass(frozen=True)
class FortRestoreStep:
    duration_ms: float = 0.5


@dataclass(frozen=True)
class BlowAwayStep:
    pass


@dataclass(frozen=True)
class DetectStep:
    pass


@dataclass(frozen=True)
class SequenceSpec:
    steps: tuple

    def __post_init__(self):
        detects = [i for i, s in enumerate(self.steps)
                   if isinstance(s, DetectStep)]
        if len(detects) > 1:
            raise ValueError("at most one detect step allowed")
        if detects and detects[0] != len(self.steps) - 1:
            raise ValueError("detect must be the final step")

    def pulses(self):
        return [s for s in self.steps if isinstance(s, PulseStep)]

    def pulse_index(self, name: str) -> int:
        for i, s in enumerate(self.steps):
            if isinstance(s, PulseStep) and s.name == name:
                return i
        raise KeyError(f"no pulse named {name}")


NAMED_SEQUENCES = ("A1B1", "A1B1A2B2", "A1B1A2B2-probe")


def named_sequence(name: str) -> SequenceSpec:
    tail = (FortRestoreStep(), BlowAwayStep(), DetectStep())
    a1 = PulseStep("A1", "A", collective_pi="nbar")
    b1 = PulseStep("B1", "B", collective_pi=1)
    if name == "A1B1":
        return SequenceSpec((a1, b1) + tail)
    a2 = PulseStep("A2", "A", collective_pi="nbar-1")
    b2 = PulseStep("B2", "B", collective_pi=2)
    if name == "A1B1A2B2":
        return SequenceSpec((a1, b1, a2, b2) + tail)
    if name == "A1B1A2B2-probe":
        b3 = PulseStep("B3", "B", collective_pi=2)
        return SequenceSpec((a1, b1, a2, b2, FortRestoreStep(0.5), b3) + tail)
    raise KeyError(f"unknown sequence {name!r}; known: {NAMED_SEQUENCES}")


def sequence_to_json(seq: SequenceSpec) -> list:
    out = []
    for s in seq.steps:
        if isinstance(s, PulseStep):
            entry = {"name": s.name, "channel": s.channel}
            if s.duration is not None:
                entry["duration_us"] = s.duration
            else:
                entry["collective_pi"] = s.collective_pi
            if s.global_detuning:
                entry["global_detuning_mhz"] = s.global_detuning / (2 * math.pi)
            if s.phase:
                entry["phase_rad"] = s.phase
            out.append({"pulse": entry})
        elif isinstance(s, FortRestoreStep):
            out.append({"fort_restore": {"duration_ms": s.duration_ms}})
        elif isinstance(s, BlowAwayStep):
            out.append({"blow_away": {}})
        else:
            out.append({"detect": {}})
    return out


def sequence_from_json(data) -> SequenceSpec:
    if isinstance(data, str):
        return named_sequence(data)
    steps = []
    for item in data:
        (kind, body), = item.items()
        if kind == "pulse":
            steps.append(PulseStep(
                name=body["name"], channel=body["channel"],
                duration=body.get("duration_us"),
                collective_pi=body.get("collective_pi"),
                global_detuning=2 * math.pi * body.get("global_detuning_mhz",
                                                       0.0),
                phase=body.get("phase_rad", 0.0)))
        elif kind == "fort_restore":
            steps.append(FortRestoreStep(body.get("duration_ms", 0.5)))
        elif kind == "blow_away":
            steps.append(BlowAwayStep())
        elif kind == "detect":
            steps.append(DetectStep())
        else:
            raise ValueError(f"unknown sequence step kind {kind!r}")
    return SequenceSpec(tuple(steps))


# ---------------------------------------------------------------------------
# outcomes

@dataclass(frozen=True)
class MeasurementRecord:
    trajectory_seed: int
    initial_n: int
    n_b: int
    n_rydberg_lost: int = 0
    n_blown: int = 0
    recapture_losses: int = 0
    n_undetected: int = 0

    def __post_init__(self):
        counts = (self.n_b, self.n_rydberg_lost, self.n_blown,
                  self.recapture_losses, self.n_undetected)
        if any(c < 0 for c in counts):
            raise ValueError("counts must be nonnegative")
        if sum(counts) != self.initial_n:
            raise ValueError("measurement record does not conserve atoms")


@dataclass(frozen=True)
class NumberDistribution:
    probabilities: np.ndarray
    n_trajectories: int
    mean: float
    variance: float
    mandel_q: float | None

    @classmethod
    def from_counts(cls, counts, n_trajectories):
        counts = np.asarray(counts, dtype=float)
        if counts.sum() != n_trajectories:
            raise ValueError("histogram counts do not sum to n_trajectories")
        return cls.from_probabilities(counts / n_trajectories, n_trajectories)

    @classmethod
    def from_probabilities(cls, probabilities, n_trajectories=0,
                           normalize=True):
        p = np.asarray(probabilities, dtype=float)
        if np.any(p < 0):
            raise ValueError("probabilities must be nonnegative")
        total = p.sum()
        if abs(total - 1.0) > (0.02 if normalize else 1e-9):
            raise ValueError(f"probabilities sum to {total}, not 1")
        p = p / total
        n = np.arange(len(p))
        mean = float(n @ p)
        variance = float((n - mean) ** 2 @ p)
        q = variance / mean - 1.0 if mean > 0 else None
        p.setflags(write=False)
        return cls(probabilities=p, n_trajectories=n_trajectories,
                   mean=mean, variance=variance, mandel_q=q)


# ---------------------------------------------------------------------------
# trajectory execution

def dephasing_rates(atom_config, physical, model="calibrated"):
    """Per-atom jump rates for the driven-ground-label projector jump.

    'calibrated': 4/tau_coh scaled with local red intensity, reproducing the
    measured exp(-t/tau) Rabi envelope (a projector jump at rate G damps the
    oscillation as exp(-G t / 4)).  'intermediate-state': the ab-initio
    photon-scattering rate, which is ~15x weaker than the observed
    decoherence and provided for comparison only.
    """
    if model == "calibrated":
        red_peak = physical.effective_peaks()[0]
        scale = (atom_config.omega_red / red_peak) ** 2
        return (4.0 / physical.tau_coh) * scale
    if model == "intermediate-state":
        return scattering_rate(atom_config.omega_red,
                               physical.delta_intermediate, physical.gamma_5p)
    raise ValueError(f"unknown dephasing model {model!r}")


@dataclass
class _Tally:
    n_rydberg_lost: int = 0
    recapture_losses: int = 0
    n_blown: int = 0
    n_undetected: int = 0


class _TrajectoryRun:
    """Single-trajectory executor shared by run_sequence and the scans."""

    def __init__(self, experiment: ExperimentConfig, seed):
        self.experiment = experiment
        if isinstance(seed, np.random.SeedSequence):
            self.seed_value = int(seed.entropy if not seed.spawn_key
                                  else seed.spawn_key[-1])
            self.rng = np.random.Generator(np.random.PCG64(seed))
        else:
            self.seed_value = int(seed)
            self.rng = np.random.Generator(np.random.PCG64(seed))
        ex = experiment
        if ex.n_bar is not None:
            self.n_atoms = draw_atom_number(ex.n_bar,
                                            default_n_max(ex.n_bar), self.rng)
        else:
            self.n_atoms = ex.fixed_n
        cloud_seed = int(self.rng.integers(0, 2**63 - 1))
        beams = ex.resolved_beams()
        self.atom_config = sample_cloud(
            ex.cloud, ex.physical, self.n_atoms, cloud_seed,
            beams=(beams.red, beams.blue),
            include_doppler=ex.toggles.doppler,
            include_ac_stark=ex.toggles.ac_stark)
        if ex.toggles.scattering and self.n_atoms:
            self.rates = dephasing_rates(self.atom_config, ex.physical,
                                         ex.dephasing_model)
        else:
            self.rates = np.zeros(self.n_atoms)
        r_max = ex.numerics.r_max if ex.toggles.finite_blockade else 1
        self.r_max = r_max
        blockade = (self.atom_config.blockade if ex.toggles.finite_blockade
                    else np.zeros((self.n_atoms, self.n_atoms)))
        self.blockade = blockade
        self.atom_ids = np.arange(self.n_atoms)
        self.engine = None
        if self.n_atoms:
            basis = cached_basis(self.n_atoms, r_max, ex.numerics.b_max)
            self.engine = SequenceEngine(
                basis, self.atom_config.rabi_two_photon,
                self.atom_config.detuning_two_photon, blockade, self.rates,
                EngineOptions(jump_target_prob=ex.numerics.jump_target_prob))
        self.elapsed_off = 0.0
        self.tally = _Tally()
        self.omega_1 = ex.physical.calibrated_omega_1()
        self.n_for_timing = ex.mean_atom_number()

    # -- step helpers -------------------------------------------------------

    def pulse_duration(self, step: PulseStep) -> float:
        return step.resolve_duration(self.n_for_timing, self.omega_1)

    def run_pulse(self, step: PulseStep, snapshot_times=None):
        duration = (self.pulse_duration(step) if snapshot_times is None
                    else float(snapshot_times[-1]))
        if self.engine is not None:
            drive = DriveSpec(step.channel, duration, step.global_detuning,
                              step.phase)
            self.engine.pulse(drive, self.rng, snapshot_times=snapshot_times)
        self.elapsed_off += duration

    def drop_interval(self, probe: bool) -> float:
        m = self.experiment.measurement
        configured = m.probe_drop_time if probe else m.drop_time
        return configured if configured is not None else self.elapsed_off

    def _atom_recaptured(self, atom_id: int, drop_time: float) -> bool:
        radius = self.experiment.measurement.trap_radius
        v = self.atom_config.velocities[atom_id]
        return bool(np.all(np.abs(v) * drop_time <= radius))

    def mid_restore(self):
        """Projective ejection of Rydberg population mid-sequence.

        Samples the Rydberg occupation pattern (the trap light measures it by
        ejecting those atoms), applies recapture losses for the elapsed drop,
        and rebuilds the engine over the surviving atoms.  Hyperfine
        coherences among survivors are kept.
        """
        if self.engine is None:
            self.elapsed_off = 0.0
            return
        if self.engine.n_columns != 1:
            raise ValueError("mid-sequence restore requires a single column")
        basis = self.engine.basis
        labels = basis.labels
        probs = self.engine.probabilities()[0]
        idx = _sample_index(probs, self.rng)
        r_local = np.nonzero(labels[idx] == CODE_R)[0]

        keep = np.ones(basis.size, dtype=bool)
        for j in r_local:
            keep &= labels[:, j] == CODE_R
        for j in np.setdiff1d(np.arange(basis.n_atoms), r_local):
            keep &= labels[:, j] != CODE_R
        self.engine.project_columns(keep)
        self.tally.n_rydberg_lost += len(r_local)

        drop = self.drop_interval(probe=False)
        lost_local = []
        for j in range(basis.n_atoms):
            if j in r_local:
                continue
            if not self._atom_recaptured(self.atom_ids[j], drop):
                lost_local.append(j)
        self.tally.recapture_losses += len(lost_local)

        removed = sorted(set(r_local.tolist()) | set(lost_local))
        # collapse the labels of recapture-lost atoms before dropping them
        amps = self.engine.amps[:, 0]
        for j in lost_local:
            pb = float(np.sum(np.abs(amps[labels[:, j] == CODE_B]) ** 2))
            pick_b = self.rng.random() < pb / float(np.vdot(amps, amps).real)
            code = CODE_B if pick_b else 0
            mask = labels[:, j] == code
            amps = np.where(mask, amps, 0.0)
            amps = amps / np.linalg.norm(amps)
        self._rebuild_without(removed, labels, amps)
        self.elapsed_off = 0.0

    def _rebuild_without(self, removed_local, labels, amps):
        survivors = np.setdiff1d(np.arange(len(self.atom_ids)), removed_local)
        self.atom_ids = self.atom_ids[survivors]
        n_new = len(survivors)
        if n_new == 0:
            self.engine = None
            return
        ex = self.experiment
        new_basis = cached_basis(n_new, self.r_max, ex.numerics.b_max)
        old_keep = np.nonzero(np.abs(amps) > 0)[0]
        sub = labels[old_keep][:, survivors]
        new_keys = np.ascontiguousarray(new_basis.labels).view(
            np.dtype((np.void, n_new))).ravel()
        sub_keys = np.ascontiguousarray(sub).view(
            np.dtype((np.void, n_new))).ravel()
        loc = np.searchsorted(new_keys, sub_keys)
        new_amps = np.zeros((new_basis.size, 1), dtype=complex)
        np.add.at(new_amps[:, 0], loc, amps[old_keep])
        sel = self.atom_ids
        cfg = self.atom_config
        self.engine = SequenceEngine(
            new_basis, cfg.rabi_two_photon[sel], cfg.detuning_two_photon[sel],
            self.blockade[np.ix_(sel, sel)], self.rates[sel],
            EngineOptions(jump_target_prob=ex.numerics.jump_target_prob))
        self.engine.amps = new_amps / np.linalg.norm(new_amps)

    def measure_column(self, probs, drop_time) -> MeasurementRecord:
        """Collapse one outcome column and apply the classical loss model."""
        t = _Tally(n_rydberg_lost=self.tally.n_rydberg_lost,
                   recapture_losses=self.tally.recapture_losses)
        n_b = 0
        if self.engine is not None:
            labels = self.engine.basis.labels
            idx = _sample_index(probs, self.rng)
            string = labels[idx]
            fidelity = self.experiment.measurement.blow_away_fidelity
            for j, code in enumerate(string):
                atom = self.atom_ids[j]
                if code == CODE_R:
                    t.n_rydberg_lost += 1
                    continue
                if not self._atom_recaptured(atom, drop_time):
                    t.recapture_losses += 1
                    continue
                if code == CODE_B:
                    n_b += 1
                elif self.rng.random() < fidelity:
                    t.n_blown += 1
                else:
                    t.n_undetected += 1
        return MeasurementRecord(
            trajectory_seed=self.seed_value, initial_n=self.n_atoms, n_b=n_b,
            n_rydberg_lost=t.n_rydberg_lost, n_blown=t.n_blown,
            recapture_losses=t.recapture_losses, n_undetected=t.n_undetected)


def _sample_index(probs, rng) -> int:
    cum = np.cumsum(probs)
    return int(np.searchsorted(cum, rng.random() * cum[-1]))


def _split_steps(seq: SequenceSpec):
    """Split into (quantum steps ..., classical measurement tail)."""
    last_pulse = max((i for i, s in enumerate(seq.steps)
                      if isinstance(s, PulseStep)), default=-1)
    return seq.steps[:last_pulse + 1], seq.steps[last_pulse + 1:]


def run_sequence(seq: SequenceSpec, experiment: ExperimentConfig,
                 seed) -> MeasurementRecord:
    """Execute one trajectory of a pulse program and return its outcome."""
    if isinstance(seq, str):
        seq = named_sequence(seq)
    run = _TrajectoryRun(experiment, seed)
    quantum, _tail = _split_steps(seq)
    had_restore = False
    for step in quantum:
        if isinstance(step, PulseStep):
            run.run_pulse(step)
        elif isinstance(step, FortRestoreStep):
            run.mid_restore()
            had_restore = True
    drop = run.drop_interval(probe=had_restore)
    probs = (run.engine.probabilities()[0] if run.engine is not None
             else np.ones(1))
    return run.measure_column(probs, drop)


def run_scan_trajectory(seq: SequenceSpec, experiment: ExperimentConfig,
                        scan_pulse: str, scan_times, seed):
    """One trajectory of a pulse program with one pulse duration scanned.

    The scanned pulse is evolved once with snapshots at scan_times (shared
    stochastic record, unbiased marginals per point); later pulses and the
    measurement act on every snapshot column.  Returns an (S,) array of
    detected n_b, one per scan point, plus the drawn atom number.
    """
    run = _TrajectoryRun(experiment, seed)
    quantum, _tail = _split_steps(seq)
    scan_idx = seq.pulse_index(scan_pulse)
    scan_times = np.asarray(scan_times, dtype=float)

    had_restore = False
    for i, step in enumerate(quantum):
        if isinstance(step, FortRestoreStep):
            run.mid_restore()
            had_restore = True
        elif i == scan_idx:
            run.run_pulse(step, snapshot_times=scan_times)
        else:
            run.run_pulse(step)

    drop = run.drop_interval(probe=had_restore)
    if run.engine is not None:
        all_probs = run.engine.probabilities()
    else:
        all_probs = np.ones((len(scan_times), 1))
    records = [run.measure_column(all_probs[min(c, len(all_probs) - 1)], drop)
               for c in range(len(scan_times))]
    return np.array([r.n_b for r in records], dtype=np.intp), run.n_atoms


# ---------------------------------------------------------------------------
# histogram aggregation with a worker pool

def worker_count() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def trajectory_seed_sequence(master_seed: int, index: int):
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))


def _histogram_chunk(args):
    seq_json, config, lo, hi, master_seed, n_cap = args
    seq = sequence_from_json(seq_json)
    counts = np.zeros(n_cap + 1, dtype=np.int64)
    losses = np.zeros(4, dtype=np.int64)
    for k in range(lo, hi):
        rec = run_sequence(seq, config, trajectory_seed_sequence(master_seed, k))
        counts[rec.n_b] += 1
        losses += (rec.n_rydberg_lost, rec.recapture_losses, rec.n_blown,
                   rec.n_undetected)
    return counts, losses


def _scan_chunk(args):
    seq_json, config, scan_pulse, scan_times, lo, hi, master_seed, n_cap = args
    seq = sequence_from_json(seq_json)
    counts = np.zeros((len(scan_times), n_cap + 1), dtype=np.int64)
    for k in range(lo, hi):
        nb, _ = run_scan_trajectory(seq, config, scan_pulse, scan_times,
                                    trajectory_seed_sequence(master_seed, k))
        counts[np.arange(len(scan_times)), np.minimum(nb, n_cap)] += 1
    return counts


def _outcome_cap(experiment: ExperimentConfig) -> int:
    if experiment.fixed_n is not None:
        return max(experiment.fixed_n, 1)
    return default_n_max(experiment.n_bar)


def _pooled(worker, jobs):
    n_workers = min(worker_count(), len(jobs))
    if n_workers <= 1:
        return [worker(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(worker, jobs))


def _chunk_ranges(n_traj, n_chunks):
    edges = np.linspace(0, n_traj, n_chunks + 1).astype(int)
    return [(int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:])
            if hi > lo]


def fock_histogram(seq, experiment: ExperimentConfig, n_traj: int,
                   master_seed: int) -> NumberDistribution:
    """Detected-atom-number distribution over n_traj independent trajectories.

    Each trajectory gets its own counter-based substream, so the result is
    bit-identical for a fixed (config, n_traj, master_seed) at any worker
    count.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    if isinstance(seq, str):
        seq = named_sequence(seq)
    n_cap = _outcome_cap(experiment)
    seq_json = sequence_to_json(seq)
    jobs = [(seq_json, experiment, lo, hi, master_seed, n_cap)
            for lo, hi in _chunk_ranges(n_traj, 4 * worker_count())]
    results = _pooled(_histogram_chunk, jobs)
    counts = sum(r[0] for r in results)
    return NumberDistribution.from_counts(counts, n_traj)


def scan_histograms(seq, experiment: ExperimentConfig, scan_pulse: str,
                    scan_times, n_traj: int, master_seed: int) -> np.ndarray:
    """Outcome counts per scan point, shape (len(scan_times), n_cap + 1)."""
    if isinstance(seq, str):
        seq = named_sequence(seq)
    n_cap = _outcome_cap(experiment)
    seq_json = sequence_to_json(seq)
    scan_times = np.asarray(scan_times, dtype=float)
    jobs = [(seq_json, experiment, scan_pulse, scan_times, lo, hi,
             master_seed, n_cap)
            for lo, hi in _chunk_ranges(n_traj, 4 * worker_count())]
    results = _pooled(_scan_chunk, jobs)
    return sum(results)
