"""Experiment configuration: dataclasses, JSON validation, unit conversion.

Config files use ordinary frequencies in MHz, lengths in um, times in us,
temperatures in uK, masses in amu.  Internally everything is converted to
rad/us + um + us + uK + kg on validation.  Unknown keys are rejected with
field-path-qualified messages; all errors are aggregated.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .ensemble import (BLUE_MISALIGNMENT, BLUE_WAISTS, RED_MISALIGNMENT,
                       RED_WAISTS, BeamProfile, CloudGeometry, PhysicalParams)
from .units import AMU, TWO_PI


class ConfigError(ValueError):
    """Aggregated, field-path-qualified validation failures."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class Toggles:
    """Imperfection switches mirroring the three model curves."""

    doppler: bool = True
    ac_stark: bool = True
    scattering: bool = True
    misalignment: bool = True
    finite_blockade: bool = True
    eq1_zero_n0: bool = False


@dataclass(frozen=True)
class MeasurementModel:
    blow_away_fidelity: float = 0.97
    trap_radius: float = 3.0        # um, effective recapture radius
    drop_time: float | None = None  # us; None -> sum of pulse durations
    probe_drop_time: float | None = None  # us, second drop of probe sequences

    def __post_init__(self):
        if not 0.0 <= self.blow_away_fidelity <= 1.0:
            raise ValueError("blow_away_fidelity must lie in [0, 1]")
        if self.trap_radius <= 0:
            raise ValueError("trap_radius must be positive")


@dataclass(frozen=True)
class NumericsConfig:
    r_max: int = 2
    b_max: int = 2
    jump_target_prob: float = 0.08
    basis_cap: int = 1_000_000
    dense_cap: int = 4096

    def __post_init__(self):
        if self.r_max < 0 or self.b_max < 0:
            raise ValueError("r_max and b_max must be nonnegative")
        if not 0 < self.jump_target_prob <= 0.1:
            raise ValueError("jump_target_prob must lie in (0, 0.1]")


@dataclass(frozen=True)
class ScanSpec:
    variable: str
    start: float | None = None
    stop: float | None = None
    points: int | None = None
    values: tuple | None = None

    def grid(self):
        import numpy as np
        if self.values is not None:
            return np.asarray(self.values, dtype=float)
        return np.linspace(self.start, self.stop, self.points)


@dataclass(frozen=True)
class Beams:
    red: BeamProfile
    blue: BeamProfile


@dataclass(frozen=True)
class ExperimentConfig:
    physical: PhysicalParams = field(default_factory=PhysicalParams)
    cloud: CloudGeometry = field(default_factory=CloudGeometry)
    beams: Beams | None = None  # None -> default geometry from toggles
    n_bar: float | None = 7.0
    fixed_n: int | None = None
    sequence: object = "A1B1"   # named sequence/study or a step list
    scan: ScanSpec | None = None
    n_trajectories: int = 1000
    master_seed: int = 12345
    toggles: Toggles = field(default_factory=Toggles)
    measurement: MeasurementModel = field(default_factory=MeasurementModel)
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    dephasing_model: str = "calibrated"

    def __post_init__(self):
        if (self.n_bar is None) == (self.fixed_n is None):
            raise ValueError("exactly one of n_bar / fixed_n must be set")
        if self.dephasing_model not in ("calibrated", "intermediate-state"):
            raise ValueError("unknown dephasing_model")

    def mean_atom_number(self) -> float:
        return float(self.n_bar if self.n_bar is not None else self.fixed_n)

    def resolved_beams(self) -> Beams:
        """Beam pair with misalignment zeroed when the toggle is off."""
        if self.beams is not None:
            red, blue = self.beams.red, self.beams.blue
            if not self.toggles.misalignment:
                red = BeamProfile(red.waist_x, red.waist_y, 0.0, 0.0,
                                  red.peak_rabi)
                blue = BeamProfile(blue.waist_x, blue.waist_y, 0.0, 0.0,
                                   blue.peak_rabi)
            return Beams(red, blue)
        red_peak, blue_peak = self.physical.effective_peaks()
        r_off = RED_MISALIGNMENT if self.toggles.misalignment else (0.0, 0.0)
        b_off = BLUE_MISALIGNMENT if self.toggles.misalignment else (0.0, 0.0)
        return Beams(
            BeamProfile(RED_WAISTS[0], RED_WAISTS[1], r_off[0], r_off[1],
                        red_peak),
            BeamProfile(BLUE_WAISTS[0], BLUE_WAISTS[1], b_off[0], b_off[1],
                        blue_peak))


_PHYSICAL_FIELDS = {
    "omega_red_peak_mhz": ("omega_red_peak", TWO_PI),
    "omega_blue_peak_mhz": ("omega_blue_peak", TWO_PI),
    "delta_intermediate_mhz": ("delta_intermediate", TWO_PI),
    "gamma_5p_mhz": ("gamma_5p", TWO_PI),
    "c6_mhz_um6": ("c6", TWO_PI),
    "tau_coh_us": ("tau_coh", 1.0),
    "lambda_red_um": ("lambda_red", 1.0),
    "lambda_blue_um": ("lambda_blue", 1.0),
    "temperature_uk": ("temperature", 1.0),
    "atom_mass_amu": ("atom_mass", AMU),
    "omega_1_mhz": ("omega_1", TWO_PI),
}

_CLOUD_FIELDS = {"sigma_x_um": "sigma_x", "sigma_y_um": "sigma_y",
                 "sigma_z_um": "sigma_z"}

_BEAM_FIELDS = {"waist_x_um": "waist_x", "waist_y_um": "waist_y",
                "offset_x_um": "offset_x", "offset_y_um": "offset_y",
                "peak_rabi_mhz": "peak_rabi"}

_TOGGLE_FIELDS = ("doppler", "ac_stark", "scattering", "misalignment",
                  "finite_blockade", "eq1_zero_n0")

_MEASUREMENT_FIELDS = {"blow_away_fidelity": "blow_away_fidelity",
                       "trap_radius_um": "trap_radius",
                       "drop_time_us": "drop_time",
                       "probe_drop_time_us": "probe_drop_time"}

_NUMERICS_FIELDS = ("r_max", "b_max", "jump_target_prob", "basis_cap",
                    "dense_cap")

_TOP_KEYS = {"physical", "cloud", "beams", "n_bar", "fixed_n", "sequence",
             "scan", "n_trajectories", "master_seed", "toggles",
             "measurement", "numerics", "dephasing_model"}

_SCAN_VARIABLES = {"a1_area", "b2_area", "b3_area", "n_bar"}


def _check_number(out, errors, path, raw, key, allow_none=False):
    if key not in raw:
        return False
    val = raw[key]
    if val is None and allow_none:
        out[key] = None
        return True
    if not isinstance(val, (int, float)) or isinstance(val, bool):
        errors.append(f"{path}.{key}: expected a number, got {val!r}")
        return False
    out[key] = float(val)
    return True


def _reject_unknown(errors, path, raw, known):
    for key in raw:
        if key not in known:
            errors.append(f"{path}.{key}: unknown key")


def _parse_section(errors, path, raw, mapping, cls, allow_none=()):
    kwargs = {}
    _reject_unknown(errors, path, raw, mapping)
    staged = {}
    for key in mapping:
        if _check_number(staged, errors, path, raw, key,
                         allow_none=key in allow_none):
            spec = mapping[key]
            if isinstance(spec, tuple):
                name, scale = spec
            else:
                name, scale = spec, 1.0
            val = staged[key]
            kwargs[name] = None if val is None else val * scale
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"{path}: {exc}")
        return None


def validate_config(raw: dict) -> ExperimentConfig:
    """Validate a raw JSON dict; raises ConfigError with every problem found."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a JSON object"])
    _reject_unknown(errors, "config", raw, _TOP_KEYS)

    physical = _parse_section(errors, "physical", raw.get("physical", {}),
                              _PHYSICAL_FIELDS, PhysicalParams,
                              allow_none=("omega_1_mhz",))
    cloud = _parse_section(errors, "cloud", raw.get("cloud", {}),
                           _CLOUD_FIELDS, CloudGeometry)

    beams = None
    if "beams" in raw:
        braw = raw["beams"]
        _reject_unknown(errors, "beams", braw, {"red", "blue"})
        parsed = {}
        for leg in ("red", "blue"):
            if leg not in braw:
                errors.append(f"beams.{leg}: missing")
                continue
            mapping = dict(_BEAM_FIELDS)
            sub = dict(braw[leg])
            if "peak_rabi_mhz" not in sub and physical is not None:
                peaks = dict(zip(("red", "blue"), physical.effective_peaks()))
                sub["peak_rabi_mhz"] = peaks[leg] / TWO_PI
            parsed[leg] = _parse_section(errors, f"beams.{leg}", sub,
                                         {k: (v, TWO_PI) if k == "peak_rabi_mhz"
                                          else v for k, v in mapping.items()},
                                         BeamProfile)
        if None not in parsed.values() and len(parsed) == 2:
            beams = Beams(red=parsed["red"], blue=parsed["blue"])

    n_bar = raw.get("n_bar")
    fixed_n = raw.get("fixed_n")
    if n_bar is not None and fixed_n is not None:
        errors.append("config: n_bar and fixed_n are both set; choose one "
                      "(fields n_bar, fixed_n)")
    if n_bar is None and fixed_n is None:
        n_bar = 7.0
    if n_bar is not None and (not isinstance(n_bar, (int, float))
                              or isinstance(n_bar, bool) or n_bar < 0):
        errors.append("config.n_bar: must be a nonnegative number")
    if fixed_n is not None and (not isinstance(fixed_n, int)
                                or isinstance(fixed_n, bool) or fixed_n < 0):
        errors.append("config.fixed_n: must be a nonnegative integer")

    sequence = raw.get("sequence", "A1B1")
    if not isinstance(sequence, (str, list)):
        errors.append("config.sequence: must be a name or a step list")

    scan = None
    if "scan" in raw and raw["scan"] is not None:
        sraw = raw["scan"]
        _reject_unknown(errors, "scan", sraw,
                        {"variable", "start", "stop", "points", "values"})
        var = sraw.get("variable")
        if var not in _SCAN_VARIABLES:
            errors.append(f"scan.variable: must be one of "
                          f"{sorted(_SCAN_VARIABLES)}, got {var!r}")
        values = sraw.get("values")
        if values is not None:
            if (not isinstance(values, list) or len(values) < 1
                    or not all(isinstance(v, (int, float)) for v in values)):
                errors.append("scan.values: must be a nonempty number list")
            else:
                scan = ScanSpec(variable=var, values=tuple(float(v)
                                                           for v in values))
        else:
            pts = sraw.get("points")
            ok = isinstance(pts, int) and pts >= 2
            if not ok:
                errors.append("scan.points: must be an integer >= 2")
            for key in ("start", "stop"):
                if not isinstance(sraw.get(key), (int, float)):
                    errors.append(f"scan.{key}: must be a number")
                    ok = False
            if ok and var in _SCAN_VARIABLES:
                scan = ScanSpec(variable=var, start=float(sraw["start"]),
                                stop=float(sraw["stop"]), points=pts)

    n_traj = raw.get("n_trajectories", 1000)
    if not isinstance(n_traj, int) or isinstance(n_traj, bool) or n_traj < 1:
        errors.append("config.n_trajectories: must be a positive integer")
    master_seed = raw.get("master_seed", 12345)
    if not isinstance(master_seed, int) or isinstance(master_seed, bool):
        errors.append("config.master_seed: must be an integer")

    tkw = {}
    traw = raw.get("toggles", {})
    _reject_unknown(errors, "toggles", traw, set(_TOGGLE_FIELDS))
    for key in _TOGGLE_FIELDS:
        if key in traw:
            if not isinstance(traw[key], bool):
                errors.append(f"toggles.{key}: must be a boolean")
            else:
                tkw[key] = traw[key]

    measurement = _parse_section(
        errors, "measurement", raw.get("measurement", {}),
        _MEASUREMENT_FIELDS, MeasurementModel,
        allow_none=("drop_time_us", "probe_drop_time_us"))

    nraw = raw.get("numerics", {})
    _reject_unknown(errors, "numerics", nraw, set(_NUMERICS_FIELDS))
    nkw = {}
    for key in _NUMERICS_FIELDS:
        if key in nraw:
            val = nraw[key]
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                errors.append(f"numerics.{key}: must be a number")
            else:
                nkw[key] = int(val) if key != "jump_target_prob" else float(val)
    try:
        numerics = NumericsConfig(**nkw)
    except ValueError as exc:
        errors.append(f"numerics: {exc}")
        numerics = None

    dephasing = raw.get("dephasing_model", "calibrated")
    if dephasing not in ("calibrated", "intermediate-state"):
        errors.append("config.dephasing_model: must be 'calibrated' or "
                      "'intermediate-state'")

    if errors or None in (physical, cloud, measurement, numerics):
        raise ConfigError(errors or ["invalid configuration"])

    try:
        return ExperimentConfig(
            physical=physical, cloud=cloud, beams=beams,
            n_bar=None if n_bar is None else float(n_bar),
            fixed_n=fixed_n, sequence=sequence, scan=scan,
            n_trajectories=n_traj, master_seed=master_seed,
            toggles=Toggles(**tkw), measurement=measurement,
            numerics=numerics, dephasing_model=dephasing)
    except ValueError as exc:
        raise ConfigError([f"config: {exc}"]) from None


def config_echo(config: ExperimentConfig) -> dict:
    """Canonical JSON dict that re-validates to an identical config."""
    p = config.physical
    out = {
        "physical": {
            "omega_red_peak_mhz": p.omega_red_peak / TWO_PI,
            "omega_blue_peak_mhz": p.omega_blue_peak / TWO_PI,
            "delta_intermediate_mhz": p.delta_intermediate / TWO_PI,
            "gamma_5p_mhz": p.gamma_5p / TWO_PI,
            "c6_mhz_um6": p.c6 / TWO_PI,
            "tau_coh_us": p.tau_coh,
            "lambda_red_um": p.lambda_red,
            "lambda_blue_um": p.lambda_blue,
            "temperature_uk": p.temperature,
            "atom_mass_amu": p.atom_mass / AMU,
            "omega_1_mhz": None if p.omega_1 is None else p.omega_1 / TWO_PI,
        },
        "cloud": {"sigma_x_um": config.cloud.sigma_x,
                  "sigma_y_um": config.cloud.sigma_y,
                  "sigma_z_um": config.cloud.sigma_z},
        "sequence": config.sequence,
        "n_trajectories": config.n_trajectories,
        "master_seed": config.master_seed,
        "toggles": {k: getattr(config.toggles, k) for k in _TOGGLE_FIELDS},
        "measurement": {
            "blow_away_fidelity": config.measurement.blow_away_fidelity,
            "trap_radius_um": config.measurement.trap_radius,
            "drop_time_us": config.measurement.drop_time,
            "probe_drop_time_us": config.measurement.probe_drop_time,
        },
        "numerics": {k: getattr(config.numerics, k) for k in _NUMERICS_FIELDS},
        "dephasing_model": config.dephasing_model,
    }
    if config.beams is not None:
        out["beams"] = {
            leg: {
                "waist_x_um": beam.waist_x, "waist_y_um": beam.waist_y,
                "offset_x_um": beam.offset_x, "offset_y_um": beam.offset_y,
                "peak_rabi_mhz": beam.peak_rabi / TWO_PI,
            }
            for leg, beam in (("red", config.beams.red),
                              ("blue", config.beams.blue))
        }
    if config.n_bar is not None:
        out["n_bar"] = config.n_bar
    else:
        out["fixed_n"] = config.fixed_n
    if config.scan is not None:
        s = config.scan
        if s.values is not None:
            out["scan"] = {"variable": s.variable, "values": list(s.values)}
        else:
            out["scan"] = {"variable": s.variable, "start": s.start,
                           "stop": s.stop, "points": s.points}
    return out


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return validate_config(json.load(fh))
