"""Run configuration: INI parsing, SI-suffixed quantities and defaults.

Every parameter the toolkit accepts lives in the schema below with its
default; an empty (or absent) config file therefore runs the standard
two-ion self-interference setup.  Unknown sections or keys are rejected
by name.  Frequencies in the file are ordinary frequencies (Hz, kHz,
MHz); the trap and drive dataclasses store angular frequencies in rad/s.
"""

import configparser
import io
import math
import re

from .modes import (ATOMIC_MASS, DEFAULT_AMPLITUDES, ELEMENTARY_CHARGE,
                    TrapConfig, compute_normal_modes)
from .simulator import (CONFIGURATIONS, DetectorConfig, InterferometerConfig,
                        MotionState)

TWO_PI = 2.0 * math.pi


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


_NUMBER = re.compile(r"^[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")

_SUFFIXES = {
    "time": {"fs": 1e-15, "ps": 1e-12, "ns": 1e-9, "us": 1e-6, "µs": 1e-6,
             "ms": 1e-3, "s": 1.0},
    "frequency": {"Hz": 1.0, "kHz": 1e3, "MHz": 1e6, "GHz": 1e9},
    "length": {"pm": 1e-12, "nm": 1e-9, "um": 1e-6, "µm": 1e-6, "mm": 1e-3,
               "cm": 1e-2, "m": 1.0},
    "float": {},
    "rate": {},
}


def parse_quantity(text, kind="float", key="value"):
    """Parse '16ns', '5 ms', '1.6465MHz', '0.35' into base SI units.

    Suffixes are case-sensitive; a bare number is taken in the base unit
    (s, Hz, m).
    """
    s = str(text).strip()
    m = _NUMBER.match(s)
    if not m:
        raise ConfigError(f"{key}: cannot parse number from {text!r}")
    value = float(m.group(0))
    suffix = s[m.end():].strip()
    table = _SUFFIXES.get(kind, {})
    if not suffix:
        return value
    if suffix not in table:
        raise ConfigError(f"{key}: unknown {kind} suffix {suffix!r} in {text!r}")
    return value * table[suffix]


def _parse_int(text, key):
    try:
        return int(str(text).strip())
    except ValueError:
        raise ConfigError(f"{key}: expected integer, got {text!r}") from None


def _parse_bool(text, key):
    s = str(text).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected boolean, got {text!r}")


def _parse_vector(text, key, kind="float"):
    parts = [p for p in str(text).split(",") if p.strip()]
    return tuple(parse_quantity(p, kind, key) for p in parts)


def _parse_windows(text, key):
    out = []
    for item in str(text).split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise ConfigError(f"{key}: window {item!r} must be start:length")
        start, length = item.split(":", 1)
        out.append((parse_quantity(start, "time", key),
                    parse_quantity(length, "time", key)))
    if not out:
        raise ConfigError(f"{key}: at least one window required")
    return out


# schema: section -> key -> (kind, default-as-text)
SCHEMA = {
    "trap": {
        "ion_count": ("int", "2"),
        "f_x": ("frequency", "1.665117MHz"),
        "f_y": ("frequency", "1.698637MHz"),
        "f_z": ("frequency", "0.711429MHz"),
        "f_rf": ("frequency", "15MHz"),
        "ion_mass_amu": ("float", "137.9052472"),
        "charge_e": ("float", "1"),
    },
    "amplitudes": {
        "x_single": ("length", "14.1421nm"),
        "y_single": ("length", "14.1421nm"),
        "z_single": ("length", "28.2843nm"),
        "x_common": ("length", "14.1421nm"),
        "y_common": ("length", "14.1421nm"),
        "x_rocking": ("length", "14.1421nm"),
        "y_rocking": ("length", "14.1421nm"),
        "z_common": ("length", "28.2843nm"),
        "z_breathing": ("length", "26.5nm"),
        "fwhm": ("frequency", "800Hz"),
    },
    "interferometer": {
        "wavelength": ("length", "493.4nm"),
        "mirror_distance": ("length", "0.30m"),
        "contrast_self": ("float", "0.35"),
        "contrast_mutual": ("float", "0.15"),
        "base_rate": ("rate", "5e4"),
        "lock_slope": ("int", "+1"),
        "configuration": ("str", "self_ion1"),
        "optical_axis": ("vec", "0.7, 0.7, 0.14"),
        "axis_misalignment_z": ("float", "0.18"),
        "mutual_axial_coupling": ("float", "0.8"),
        "mirror_shift_pkpk": ("frequency", "0Hz"),
    },
    "detectors": {
        "n_detectors": ("int", "2"),
        "dead_time": ("time", "100ns"),
        "splitting": ("vec", "0.5, 0.5"),
        "timestamp_resolution": ("time", "1ps"),
    },
    "simulation": {
        "duration": ("time", "900s"),
        "seed": ("int", "1"),
        "drift_rms": ("length", "2.5nm"),
        "feedback_period": ("time", "100ms"),
        "feedback_gain": ("float", "0.8"),
        "feedback": ("bool", "true"),
        "memory_budget": ("float", "2.5e8"),
    },
    "analysis": {
        "bin_width": ("time", "16ns"),
        "max_lag": ("time", "5ms"),
        "segments": ("int", "10"),
        "noise_band_low": ("frequency", "2MHz"),
        "noise_band_high": ("frequency", "3MHz"),
        "threshold_sigma": ("float", "5"),
        "window": ("str", "rectangular"),
        "spectrum_mode": ("str", "magnitude"),
        "fit_window": ("frequency", "5kHz"),
        "fit_weighting": ("str", "model"),
        "nsr_lags": ("str", "0.25ms, 0.5ms, 1ms, 2ms, 5ms, 10ms"),
    },
    "pulsed": {
        "drive_frequency": ("frequency", "1.6465MHz"),
        "drive_phase": ("float", "0"),
        "pulse_duration": ("time", "50us"),
        "excited_pkpk": ("length", "100nm"),
        "decay_tau": ("time", "0.85ms"),
        "repetition_period": ("time", "1ms"),
        "windows": ("windows", "62us:12us, 413us:12us"),
        "drive_axis": ("str", "x"),
        "histogram_bin": ("time", "50ns"),
        "coarse_frequency": ("frequency", "1.6465MHz"),
    },
}

_PARSERS = {
    "time": parse_quantity,
    "frequency": parse_quantity,
    "length": parse_quantity,
    "rate": parse_quantity,
    "float": parse_quantity,
    "int": lambda t, kind, key: _parse_int(t, key),
    "bool": lambda t, kind, key: _parse_bool(t, key),
    "str": lambda t, kind, key: str(t).strip(),
    "vec": lambda t, kind, key: _parse_vector(t, key),
    "windows": lambda t, kind, key: _parse_windows(t, key),
}


def _parse_value(kind, text, key):
    parser = _PARSERS[kind]
    if parser is parse_quantity:
        return parse_quantity(text, kind, key)
    return parser(text, kind, key)


class RunConfig:
    """Fully resolved configuration with validated domain objects."""

    def __init__(self, values):
        self.values = values
        t = values["trap"]
        try:
            self.trap = TrapConfig(
                omega_x=TWO_PI * t["f_x"],
                omega_y=TWO_PI * t["f_y"],
                omega_z=TWO_PI * t["f_z"],
                omega_rf=TWO_PI * t["f_rf"],
                ion_mass=t["ion_mass_amu"] * ATOMIC_MASS,
                ion_count=t["ion_count"],
                charge=t["charge_e"] * ELEMENTARY_CHARGE,
            )
        except ValueError as exc:
            raise ConfigError(f"trap: {exc}") from exc

        a = dict(values["amplitudes"])
        self.mode_fwhm = a.pop("fwhm")
        self.amplitudes = a

        i = values["interferometer"]
        if i["configuration"] not in CONFIGURATIONS:
            raise ConfigError(
                "interferometer.configuration must be one of "
                f"{CONFIGURATIONS}, got {i['configuration']!r}")
        axis = i["optical_axis"]
        if len(axis) != 3:
            raise ConfigError("interferometer.optical_axis needs 3 components")
        norm = math.sqrt(math.fsum(c * c for c in axis))
        if norm == 0:
            raise ConfigError("interferometer.optical_axis must be nonzero")
        axis = tuple(c / norm for c in axis)
        contrast = (i["contrast_mutual"] if i["configuration"] == "mutual"
                    else i["contrast_self"])
        for name in ("contrast_self", "contrast_mutual"):
            if not 0.0 <= i[name] <= 1.0:
                raise ConfigError(
                    f"interferometer.{name} must lie in [0, 1], got {i[name]}")
        try:
            self.interferometer = InterferometerConfig(
                wavelength=i["wavelength"],
                mirror_distance_q0=i["mirror_distance"],
                contrast_nu=contrast,
                base_rate_r0=i["base_rate"],
                lock_slope=i["lock_slope"],
                configuration=i["configuration"],
                optical_axis=axis,
                axis_misalignment_z=i["axis_misalignment_z"],
                mutual_axial_coupling=i["mutual_axial_coupling"],
                mirror_shift_pkpk=i["mirror_shift_pkpk"],
            )
        except ValueError as exc:
            raise ConfigError(f"interferometer: {exc}") from exc

        d = values["detectors"]
        try:
            self.detectors = DetectorConfig(
                n_detectors=d["n_detectors"],
                dead_time=d["dead_time"],
                splitting=tuple(d["splitting"]),
                timestamp_resolution=d["timestamp_resolution"],
            )
        except ValueError as exc:
            raise ConfigError(f"detectors: {exc}") from exc

        s = values["simulation"]
        if s["duration"] < 0:
            raise ConfigError("simulation.duration must be >= 0")
        self.duration = s["duration"]
        self.seed = s["seed"]
        self.drift_rms = s["drift_rms"]
        self.feedback_period = s["feedback_period"]
        self.feedback_gain = s["feedback_gain"]
        self.feedback = s["feedback"]
        self.memory_budget = s["memory_budget"]

        self.analysis = dict(values["analysis"])
        if self.analysis["window"] not in ("rectangular", "hann"):
            raise ConfigError("analysis.window must be rectangular or hann")
        if self.analysis["spectrum_mode"] not in ("magnitude", "power"):
            raise ConfigError("analysis.spectrum_mode must be magnitude or power")
        if self.analysis["fit_weighting"] not in ("none", "model", "auto"):
            raise ConfigError("analysis.fit_weighting must be none, model or auto")
        self.analysis["nsr_lags"] = tuple(
            parse_quantity(p, "time", "analysis.nsr_lags")
            for p in self.analysis["nsr_lags"].split(",") if p.strip())

        p = values["pulsed"]
        try:
            self.protocol = MotionState(
                regime="pulsed",
                drive_frequency=TWO_PI * p["drive_frequency"],
                drive_phase=p["drive_phase"],
                pulse_duration=p["pulse_duration"],
                excited_pkpk=p["excited_pkpk"],
                decay_tau=p["decay_tau"],
                repetition_period=p["repetition_period"],
                drive_axis=p["drive_axis"],
            )
        except ValueError as exc:
            raise ConfigError(f"pulsed: {exc}") from exc
        self.pulsed_windows = p["windows"]
        self.pulsed_bin = p["histogram_bin"]
        self.coarse_frequency = p["coarse_frequency"]

    def mode_set(self):
        return compute_normal_modes(self.trap, self.amplitudes, self.mode_fwhm)


def load_config(path=None, text=None):
    """Parse an INI config (path, or literal text) into a RunConfig.

    Both may be omitted; defaults then apply throughout.
    """
    parser = configparser.ConfigParser(interpolation=None,
                                       inline_comment_prefixes=("#", ";"))
    if text is not None:
        parser.read_file(io.StringIO(text))
    elif path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {
            key: _parse_value(kind, default, f"{section}.{key}")
            for key, (kind, default) in keys.items()
        }
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            kind = SCHEMA[section][key][0]
            values[section][key] = _parse_value(kind, raw, f"{section}.{key}")
    return RunConfig(values)


def default_config_text():
    """Render the complete default configuration as INI text."""
    lines = ["# ionmotion defaults; every key shown with its default value"]
    for section, keys in SCHEMA.items():
        lines.append(f"\n[{section}]")
        for key, (kind, default) in keys.items():
            lines.append(f"{key} = {default}")
    return "\n".join(lines) + "\n"
