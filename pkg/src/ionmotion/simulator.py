"""Seeded photon-stream synthesis from the ion-mirror fringe rate model.

The detection rate follows R0 (1 + nu sin(4 pi q / lambda)) in the
distance q between the emitting ion and the mirror.  Ion motion enters
through the projection of the per-ion displacement onto the optical
axis; the feedback-held mirror adds a slowly varying offset.  Streams
are generated by thinning a homogeneous Poisson process at the fringe
maximum rate, so the accept test only ever evaluates the rate at
candidate times.

Thermal motion: each normal mode carries two independent
Ornstein-Uhlenbeck quadratures with relaxation rate D = pi * FWHM,
giving the intensity-correlation envelope exp(-pi FWHM tau) and a
Lorentzian line of the configured FWHM.  The quadratures are sampled
exactly on a regular grid (AR(1) recursion) and linearly interpolated
at candidate times, which keeps the hot kernel stateless and lets the
numba and numpy backends share every random draw.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from . import _kernels
from .modes import Mode, ModeSet

TRIGGER_CHANNEL = 255

SELF_ION1 = "self_ion1"
SELF_ION2 = "self_ion2"
MUTUAL = "mutual"
CONFIGURATIONS = (SELF_ION1, SELF_ION2, MUTUAL)


class CapacityError(RuntimeError):
    """Requested stream would exceed the in-memory event budget."""


@dataclass(frozen=True)
class InterferometerConfig:
    wavelength: float = 493.4e-9        # m, Ba+ 6P1/2 -> 6S1/2
    mirror_distance_q0: float = 0.30    # m
    contrast_nu: float = 0.35
    base_rate_r0: float = 5e4           # photons/s
    lock_slope: int = +1                # fringe slope held by the feedback
    configuration: str = SELF_ION1
    optical_axis: tuple = (0.7001400420140049, 0.7001400420140049,
                           0.140028008402801)
    axis_misalignment_z: float = 0.18
    mutual_axial_coupling: float = 0.8
    mirror_shift_pkpk: float = 0.0      # Hz, 0 disables the level-shift model

    def __post_init__(self):
        if not 0.0 <= self.contrast_nu <= 1.0:
            raise ValueError("contrast_nu must lie in [0, 1]")
        if self.base_rate_r0 <= 0:
            raise ValueError("base_rate_r0 must be positive")
        if self.wavelength <= 0:
            raise ValueError("wavelength must be positive")
        if self.lock_slope not in (+1, -1):
            raise ValueError("lock_slope must be +1 or -1")
        if self.configuration not in CONFIGURATIONS:
            raise ValueError(f"configuration must be one of {CONFIGURATIONS}")
        norm = math.fsum(a * a for a in self.optical_axis)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError("optical_axis must have unit norm")
        if abs(self.axis_misalignment_z) >= 0.2:
            raise ValueError("axis_misalignment_z outside small-angle regime")
        if self.mirror_shift_pkpk < 0:
            raise ValueError("mirror_shift_pkpk must be >= 0")

    @property
    def wavenumber(self):
        """Round-trip phase per unit path change, 4 pi / lambda."""
        return 4.0 * math.pi / self.wavelength

    @property
    def lock_phase(self):
        return 0.0 if self.lock_slope > 0 else math.pi


@dataclass(frozen=True)
class DetectorConfig:
    n_detectors: int = 2
    dead_time: float = 100e-9
    splitting: tuple = (0.5, 0.5)
    timestamp_resolution: float = 1e-12

    def __post_init__(self):
        if self.n_detectors < 1:
            raise ValueError("n_detectors must be >= 1")
        if len(self.splitting) != self.n_detectors:
            raise ValueError("splitting length must equal n_detectors")
        if abs(math.fsum(self.splitting) - 1.0) > 1e-9:
            raise ValueError("splitting must sum to 1")
        if any(p < 0 for p in self.splitting):
            raise ValueError("splitting probabilities must be >= 0")
        if self.dead_time < 0:
            raise ValueError("dead_time must be >= 0")
        if self.timestamp_resolution <= 0:
            raise ValueError("timestamp_resolution must be positive")


@dataclass(frozen=True)
class MotionState:
    """Instantaneous motion description plus pulsed-drive protocol."""

    regime: str = "thermal"             # 'thermal' or 'pulsed'
    mode_amplitudes: tuple = ()         # m
    mode_phases: tuple = ()             # rad
    drive_frequency: float = 2 * math.pi * 1.6465e6  # rad/s
    drive_phase: float = 0.0
    pulse_duration: float = 50e-6       # s
    excited_pkpk: float = 100e-9        # m, peak-to-peak after the pulse
    decay_tau: float = 0.85e-3          # s
    repetition_period: float = 1e-3     # s
    drive_axis: str = "x"

    def __post_init__(self):
        if self.regime not in ("thermal", "pulsed"):
            raise ValueError("regime must be 'thermal' or 'pulsed'")
        if self.regime == "pulsed":
            if self.drive_frequency <= 0 or self.pulse_duration <= 0:
                raise ValueError("pulsed drive needs positive frequency and duration")
            if self.excited_pkpk < 0 or self.decay_tau <= 0:
                raise ValueError("excited_pkpk >= 0 and decay_tau > 0 required")
            if self.repetition_period <= self.pulse_duration:
                raise ValueError("repetition_period must exceed pulse_duration")
            if self.drive_axis not in ("x", "y", "z"):
                raise ValueError("drive_axis must be x, y or z")


@dataclass
class TagStream:
    """Time-ordered photon records; channel 255 marks pulsed-drive triggers."""

    timestamps: np.ndarray              # int64 picoseconds
    channels: np.ndarray                # uint8
    duration: float                     # s
    timestamp_resolution: float = 1e-12
    meta: dict = field(default_factory=dict)
    warning: str = ""

    def __post_init__(self):
        self.timestamps = np.ascontiguousarray(self.timestamps, dtype=np.int64)
        self.channels = np.ascontiguousarray(self.channels, dtype=np.uint8)
        if self.timestamps.shape != self.channels.shape:
            raise ValueError("timestamps and channels must have equal length")
        if self.timestamps.size and np.any(np.diff(self.timestamps) < 0):
            raise ValueError("timestamps must be non-decreasing")

    @property
    def n_records(self):
        return self.timestamps.size

    @property
    def photon_mask(self):
        return self.channels != TRIGGER_CHANNEL

    def photon_timestamps(self):
        return self.timestamps[self.photon_mask]

    def trigger_timestamps(self):
        return self.timestamps[self.channels == TRIGGER_CHANNEL]

    def detector_channels(self):
        return sorted(int(c) for c in np.unique(self.channels) if c != TRIGGER_CHANNEL)


# ---------------------------------------------------------------------------
# fringe rate model


def path_projection(interferometer, displacements):
    """Optical path-length change (m) from per-ion displacement vectors.

    displacements: array-like of shape (n_ions, 3) in metres.  The round
    trip to the mirror doubles all projections; that factor lives in the
    4 pi / lambda wavenumber of the rate model, not here.
    """
    u = np.atleast_2d(np.asarray(displacements, dtype=float))
    axis = np.asarray(interferometer.optical_axis)
    mis = interferometer.axis_misalignment_z
    if interferometer.configuration == MUTUAL:
        if u.shape[0] != 2:
            raise ValueError("mutual configuration needs two ions")
        mean = 0.5 * (u[0] + u[1])
        rel_z = u[0, 2] - u[1, 2]
        return float(mean @ axis + 0.5 * interferometer.mutual_axial_coupling * rel_z)
    ion = 0 if interferometer.configuration == SELF_ION1 else 1
    if ion >= u.shape[0]:
        raise ValueError("self_ion2 needs a second ion displacement")
    return float(u[ion] @ axis + mis * u[ion, 2])


def instantaneous_rate(interferometer, displacements, mirror_offset=0.0):
    """Detection rate (photons/s) at one instant of the ion motion."""
    phase = interferometer.lock_phase + interferometer.wavenumber * (
        mirror_offset + path_projection(interferometer, displacements)
    )
    return interferometer.base_rate_r0 * (
        1.0 + interferometer.contrast_nu * math.sin(phase)
    )


def mode_path_couplings(mode_set, interferometer):
    """Effective rms path modulation (m) of every mode for this geometry.

    A mode with per-ion rms a and per-ion pattern v contributes
    c * a * sqrt(n_ions) to the path, where c collapses the detected
    ion (self) or the two-ion average and relative axial term (mutual).
    """
    axis = {"x": 0, "y": 1, "z": 2}
    a_vec = np.asarray(interferometer.optical_axis)
    mis = interferometer.axis_misalignment_z
    out = np.empty(len(mode_set.modes))
    for i, mode in enumerate(mode_set.modes):
        v = np.asarray(mode.mode_vector)
        proj = a_vec[axis[mode.axis]]
        if interferometer.configuration == MUTUAL:
            if v.size != 2:
                raise ValueError("mutual configuration needs a two-ion chain")
            c = float(v.mean()) * proj
            if mode.axis == "z":
                c += 0.5 * interferometer.mutual_axial_coupling * (v[0] - v[1])
        else:
            ion = 0 if interferometer.configuration == SELF_ION1 else 1
            if ion >= v.size:
                raise ValueError("self_ion2 needs a two-ion chain")
            if mode.axis == "z":
                proj = proj + mis
            c = float(v[ion]) * proj
        out[i] = c * mode.rms_amplitude * math.sqrt(v.size)
    return out


def apply_mirror_frequency_shift(mode_set, interferometer):
    """Displace every mode frequency by the mirror-induced level shift.

    The shift is +pkpk/2 on the positive fringe slope and -pkpk/2 on the
    negative one, so averaging measurements over both slopes cancels it.
    """
    pkpk = interferometer.mirror_shift_pkpk
    if pkpk == 0.0:
        return mode_set
    delta = 2 * math.pi * interferometer.lock_slope * 0.5 * pkpk
    shifted = tuple(
        Mode(
            frequency=m.frequency + delta,
            axis=m.axis,
            character=m.character,
            mode_vector=m.mode_vector,
            rms_amplitude=m.rms_amplitude,
            coherence_fwhm=m.coherence_fwhm,
        )
        for m in mode_set.modes
    )
    return ModeSet(
        modes=shifted,
        equilibrium_separation=mode_set.equilibrium_separation,
        ion_count=mode_set.ion_count,
    )


# ---------------------------------------------------------------------------
# mirror drift and feedback


@dataclass
class MirrorTrajectory:
    window_times: np.ndarray        # s, window start times
    offsets: np.ndarray             # m, offset applied during each window
    windowed_mean_rates: np.ndarray  # photons/s measured per window


def _feedback_correction(mean_rate, interferometer, gain):
    """Offset estimate from the windowed mean rate, scaled by the loop gain."""
    nu = interferometer.contrast_nu
    if nu == 0.0:
        return 0.0
    slope = interferometer.lock_slope
    est = (mean_rate / interferometer.base_rate_r0 - 1.0) / (
        nu * slope * interferometer.wavenumber
    )
    return gain * est


def mirror_drift_and_feedback(drift_rms_per_s, feedback_period=0.1, *,
                              duration=900.0, interferometer=None, seed=0,
                              gain=0.8, feedback=True, counting_noise=True):
    """Stand-alone closed-loop model of the mirror position.

    The offset random-walks with std drift_rms_per_s * sqrt(t); every
    feedback period the mean fluorescence rate of the elapsed window is
    converted to an offset estimate and a proportional correction is
    applied.  Returns the offset and windowed-rate trajectories.
    """
    if drift_rms_per_s < 0:
        raise ValueError("drift_rms_per_s must be >= 0")
    if interferometer is None:
        interferometer = InterferometerConfig()
    rng = np.random.default_rng(seed)
    n_windows = max(int(round(duration / feedback_period)), 1)
    offsets = np.empty(n_windows)
    rates = np.empty(n_windows)
    times = np.arange(n_windows) * feedback_period
    r0 = interferometer.base_rate_r0
    nu = interferometer.contrast_nu
    kwave = interferometer.wavenumber
    lock = interferometer.lock_phase
    step = drift_rms_per_s * math.sqrt(feedback_period)
    offset = 0.0
    for w in range(n_windows):
        if step > 0:
            offset += step * rng.standard_normal()
        offsets[w] = offset
        rate = r0 * (1.0 + nu * math.sin(lock + kwave * offset))
        if counting_noise:
            measured = rng.poisson(rate * feedback_period) / feedback_period
        else:
            measured = rate
        rates[w] = measured
        if feedback:
            offset -= _feedback_correction(measured, interferometer, gain)
    return MirrorTrajectory(times, offsets, rates)


# ---------------------------------------------------------------------------
# thermal stream


def _ou_grid_update(state, alphas, sig_steps, noise, out_c, out_s):
    """Advance all mode quadratures over one block of the regular grid.

    state: (n_modes, 2) current quadrature values, updated in place.
    noise: (n_modes, 2, n_grid) standard normals.
    out_c/out_s: (n_modes, n_grid + 1) grids including the entry point.
    """
    n_modes = state.shape[0]
    for m in range(n_modes):
        a = alphas[m]
        coeff_b = [sig_steps[m]]
        coeff_a = [1.0, -a]
        for q, out in ((0, out_c), (1, out_s)):
            seq, _ = lfilter(coeff_b, coeff_a, noise[m, q],
                             zi=np.array([a * state[m, q]]))
            out[m, 0] = state[m, q]
            out[m, 1:] = seq
            state[m, q] = seq[-1]


def _assign_and_censor(t_ps, rng, detectors, kernels):
    """Assign detector channels and apply per-channel dead time.

    t_ps must already be sorted integer picoseconds.
    """
    n = t_ps.size
    t_ps = np.ascontiguousarray(t_ps, dtype=np.int64)
    if detectors.n_detectors == 1:
        ch = np.zeros(n, dtype=np.uint8)
    else:
        edges = np.cumsum(detectors.splitting)[:-1]
        ch = np.searchsorted(edges, rng.random(n), side="right").astype(np.uint8)
    dead_ps = int(round(detectors.dead_time * 1e12))
    keep = np.ones(n, dtype=bool)
    for d in range(detectors.n_detectors):
        mask = ch == d
        sub = t_ps[mask]
        if dead_ps > 0 and sub.size:
            keep[mask] = kernels["dead_time_keep"](sub, dead_ps)
        elif sub.size:
            # zero dead time: break exact same-channel ties by +1 ps
            sub = sub.copy()
            for _ in range(64):
                dup = np.flatnonzero(np.diff(sub) == 0) + 1
                if dup.size == 0:
                    break
                sub[dup] += 1
            t_ps = t_ps.copy()
            t_ps[mask] = sub
    t_ps = t_ps[keep]
    ch = ch[keep]
    order = np.lexsort((ch, t_ps))
    return t_ps[order], ch[order]


def simulate_thermal_stream(trap, mode_set, interferometer, detectors,
                            duration, seed, *, drift_rms_per_s=2.5e-9,
                            feedback_period=0.1, feedback_gain=0.8,
                            feedback=True, grid_oversample=25,
                            memory_budget=2.5e8, _kernels_override=None):
    """Generate a time-tagged photon stream under continuous cooling light.

    Deterministic for fixed arguments and seed.  Mirror drift follows a
    per-feedback-window random walk corrected by the measured windowed
    count rate; the optional mirror level shift is applied to the mode
    frequencies before generation.
    """
    if duration < 0:
        raise ValueError("duration must be >= 0")
    kern = _kernels_override or {
        "accept_photons": _kernels.accept_photons,
        "dead_time_keep": _kernels.dead_time_keep,
    }
    r0 = interferometer.base_rate_r0
    nu = interferometer.contrast_nu
    rmax = r0 * (1.0 + nu)
    expected = duration * rmax
    if expected > memory_budget:
        raise CapacityError(
            f"expected {expected:.3g} candidate events exceed the memory "
            f"budget of {memory_budget:.3g}; raise memory_budget or shorten "
            "the run"
        )

    mode_set = apply_mirror_frequency_shift(mode_set, interferometer)
    omega = np.array([m.frequency for m in mode_set.modes])
    dvals = np.array([math.pi * m.coherence_fwhm for m in mode_set.modes])
    ueff = mode_path_couplings(mode_set, interferometer)
    kwave = interferometer.wavenumber
    lock = interferometer.lock_phase

    rng = np.random.default_rng(seed)
    n_modes = omega.size
    block = feedback_period
    n_blocks = int(math.ceil(duration / block)) if duration > 0 else 0
    n_grid = max(int(math.ceil(block * grid_oversample * dvals.max())), 2)
    h = block / n_grid
    alphas = np.exp(-dvals * h)
    sig_steps = np.sqrt(1.0 - alphas**2)

    state = rng.standard_normal((n_modes, 2))
    cgrid = np.empty((n_modes, n_grid + 1))
    sgrid = np.empty((n_modes, n_grid + 1))
    drift_step = drift_rms_per_s * math.sqrt(block)
    offset = 0.0
    accepted = []
    for b in range(n_blocks):
        t_start = b * block
        t_end = min(t_start + block, duration)
        span = t_end - t_start
        if span <= 0:
            break
        if drift_step > 0:
            offset += drift_step * rng.standard_normal()
        n_draw = int(rmax * span * 1.2) + 32
        gaps = rng.exponential(1.0 / rmax, size=n_draw)
        tc = t_start + np.cumsum(gaps)
        while tc[-1] < t_end:
            gaps = rng.exponential(1.0 / rmax, size=256)
            tc = np.append(tc, tc[-1] + np.cumsum(gaps))
        tc = tc[tc < t_end]
        _ou_grid_update(state, alphas, sig_steps, rng.standard_normal(
            (n_modes, 2, n_grid)), cgrid, sgrid)
        uacc = rng.random(tc.size)
        if tc.size:
            acc = kern["accept_photons"](
                tc, t_start, 1.0 / h, cgrid, sgrid, omega, ueff, kwave,
                lock + kwave * offset, nu, r0, rmax, uacc)
            n_acc = int(np.count_nonzero(acc))
            accepted.append(tc[acc])
        else:
            n_acc = 0
        if feedback and drift_step > 0 and nu > 0:
            measured = n_acc / span
            offset -= _feedback_correction(measured, interferometer,
                                           feedback_gain)

    times = np.concatenate(accepted) if accepted else np.empty(0)
    t_ps, ch = _assign_and_censor(np.round(times * 1e12).astype(np.int64),
                                  rng, detectors, kern)
    return TagStream(
        timestamps=t_ps,
        channels=ch,
        duration=duration,
        timestamp_resolution=detectors.timestamp_resolution,
        meta={
            "regime": "thermal",
            "seed": seed,
            "configuration": interferometer.configuration,
            "base_rate_r0": r0,
            "contrast_nu": nu,
            "ion_count": mode_set.ion_count,
        },
    )


# ---------------------------------------------------------------------------
# pulsed stream


def _pulsed_path_amplitude(tau, protocol, peak_path):
    """Path modulation amplitude at time tau after the drive trigger."""
    ramp = np.clip(tau / protocol.pulse_duration, 0.0, 1.0)
    decay = np.exp(-np.maximum(tau - protocol.pulse_duration, 0.0)
                   / protocol.decay_tau)
    return peak_path * ramp * decay


def pulsed_rate(tau, protocol, interferometer):
    """Detection rate at time tau (s) after the drive trigger."""
    axis_idx = {"x": 0, "y": 1, "z": 2}[protocol.drive_axis]
    proj = interferometer.optical_axis[axis_idx]
    if protocol.drive_axis == "z":
        proj = proj + interferometer.axis_misalignment_z
    peak_path = 0.5 * protocol.excited_pkpk * proj
    amp = _pulsed_path_amplitude(np.asarray(tau, dtype=float), protocol, peak_path)
    phase = interferometer.lock_phase + interferometer.wavenumber * amp * np.sin(
        protocol.drive_frequency * np.asarray(tau, dtype=float)
        + protocol.drive_phase
    )
    return interferometer.base_rate_r0 * (
        1.0 + interferometer.contrast_nu * np.sin(phase)
    )


def simulate_pulsed_stream(protocol, windows, repetitions, interferometer,
                           detectors, seed, *, memory_budget=2.5e8,
                           _kernels_override=None):
    """Generate a triggered stream: drive pulse at t=0 of each repetition,
    photons only inside the illumination windows.

    windows: iterable of (start_s, length_s) within one repetition period.
    A trigger record (channel 255) marks each repetition start.
    """
    if protocol.regime != "pulsed":
        raise ValueError("protocol.regime must be 'pulsed'")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    kern = _kernels_override or {
        "dead_time_keep": _kernels.dead_time_keep,
    }
    period = protocol.repetition_period
    wins = sorted((float(s), float(l)) for s, l in windows)
    if not wins:
        raise ValueError("at least one illumination window required")
    warning = ""
    prev_end = None
    for start, length in wins:
        if length <= 0:
            raise ValueError("window length must be positive")
        if start < 0 or start + length > period:
            raise ValueError("windows must lie within one repetition period")
        if prev_end is not None and start < prev_end:
            raise ValueError("windows must not overlap")
        prev_end = start + length
        if start < protocol.pulse_duration:
            warning = ("illumination window overlaps the drive pulse; "
                       "the measured phase includes the driven build-up")
    if warning:
        warnings.warn(warning, stacklevel=2)

    r0 = interferometer.base_rate_r0
    nu = interferometer.contrast_nu
    rmax = r0 * (1.0 + nu)
    illuminated = sum(l for _, l in wins)
    if repetitions * illuminated * rmax > memory_budget:
        raise CapacityError("expected candidate count exceeds memory budget")

    rng = np.random.default_rng(seed)
    period_ps = np.int64(round(period * 1e12))
    photon_parts = []
    for start, length in wins:
        counts = rng.poisson(length * rmax, size=repetitions)
        total = int(counts.sum())
        taus = start + rng.random(total) * length
        uacc = rng.random(total)
        keep = uacc * rmax < pulsed_rate(taus, protocol, interferometer)
        rep_idx = np.repeat(np.arange(repetitions, dtype=np.int64), counts)
        # quantize relative to the repetition trigger so every repetition
        # carries the identical drive phase grid
        photon_parts.append(rep_idx[keep] * period_ps
                            + np.round(taus[keep] * 1e12).astype(np.int64))
    ph_ps = np.concatenate(photon_parts)
    ph_ps.sort(kind="stable")
    t_ps, ch = _assign_and_censor(ph_ps, rng, detectors, kern)

    trig_ps = np.arange(repetitions, dtype=np.int64) * period_ps
    all_t = np.concatenate([t_ps, trig_ps])
    all_c = np.concatenate([ch, np.full(repetitions, TRIGGER_CHANNEL,
                                        dtype=np.uint8)])
    order = np.lexsort((all_c, all_t))
    return TagStream(
        timestamps=all_t[order],
        channels=all_c[order],
        duration=repetitions * period,
        timestamp_resolution=detectors.timestamp_resolution,
        meta={
            "regime": "pulsed",
            "seed": seed,
            "repetitions": repetitions,
            "windows": [list(w) for w in wins],
            "drive_frequency_hz": protocol.drive_frequency / (2 * math.pi),
            "base_rate_r0": r0,
            "contrast_nu": nu,
        },
        warning=warning,
    )
