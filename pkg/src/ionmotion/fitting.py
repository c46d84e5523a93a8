"""Quantitative extraction: Lorentzian line fits on motional spectra and
phase-sensitive frequency estimation from pulsed-excitation histograms."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .simulator import TRIGGER_CHANNEL


class FitConvergenceError(RuntimeError):
    """Fit did not converge; carries the last iterate."""

    def __init__(self, message, last_params=None):
        super().__init__(message)
        self.last_params = last_params


class NoOscillationError(RuntimeError):
    """Fitted oscillation amplitude is consistent with zero."""


class TriggerError(ValueError):
    """Stream carries no trigger records."""


class AmbiguityError(ValueError):
    """Coarse frequency too inaccurate to resolve the cycle count."""


@dataclass
class LorentzianFit:
    center_f0: float        # Hz
    fwhm: float             # Hz
    amplitude: float        # spectrum units
    offset: float           # spectrum units
    sigma_f0: float         # Hz
    sigma_fwhm: float       # Hz
    residual_norm: float    # ||residual|| / ||data - mean||
    converged: bool = True
    weighting: str = "none"

    def as_dict(self):
        return {
            "center_f0_hz": self.center_f0,
            "fwhm_hz": self.fwhm,
            "amplitude": self.amplitude,
            "offset": self.offset,
            "sigma_f0_hz": self.sigma_f0,
            "sigma_fwhm_hz": self.sigma_fwhm,
            "residual_norm": self.residual_norm,
            "converged": self.converged,
            "weighting": self.weighting,
        }


@dataclass
class SineFit:
    amplitude: float        # counts
    phase: float            # rad in (-pi, pi], at the window start
    offset: float           # counts
    frequency: float        # Hz
    reference_time: float   # s after the trigger: first rising zero crossing
    sigma_amplitude: float
    sigma_phase: float
    sigma_offset: float
    sigma_frequency: float
    sigma_reference_time: float
    window: tuple           # (offset_s, length_s) that was fitted

    def as_dict(self):
        return {
            "amplitude": self.amplitude,
            "phase_rad": self.phase,
            "offset": self.offset,
            "frequency_hz": self.frequency,
            "reference_time_s": self.reference_time,
            "sigma_amplitude": self.sigma_amplitude,
            "sigma_phase_rad": self.sigma_phase,
            "sigma_offset": self.sigma_offset,
            "sigma_frequency_hz": self.sigma_frequency,
            "sigma_reference_time_s": self.sigma_reference_time,
            "window_s": list(self.window),
        }


@dataclass
class PhaseFrequencyEstimate:
    t1: float               # s
    t2: float               # s
    n_cycles: int
    frequency: float        # Hz
    sigma_frequency: float  # Hz

    def as_dict(self):
        return {
            "t1_s": self.t1,
            "t2_s": self.t2,
            "n_cycles": self.n_cycles,
            "frequency_hz": self.frequency,
            "sigma_frequency_hz": self.sigma_frequency,
        }


@dataclass
class TriggeredHistogram:
    counts: np.ndarray
    bin_width: float
    window: tuple           # (offset_s, length_s) relative to the trigger
    n_triggers: int
    n_pre_trigger: int      # photons before the first trigger (ignored)

    def tau_centers(self):
        """Bin centres in seconds after the trigger."""
        return self.window[0] + (np.arange(self.counts.size) + 0.5) * self.bin_width


def lorentzian(f, amplitude, center, fwhm, offset):
    half = 0.5 * fwhm
    return amplitude * half**2 / ((f - center) ** 2 + half**2) + offset


def _covariance(res):
    """Parameter covariance from a least_squares result, residual-scaled."""
    dof = max(res.fun.size - res.x.size, 1)
    s2 = 2.0 * res.cost / dof
    jtj = res.jac.T @ res.jac
    try:
        cov = np.linalg.inv(jtj) * s2
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(jtj) * s2
    return cov


def fit_lorentzian(spectrum, center_guess, window=5e3, weighting="none"):
    """Fit A (G/2)^2 / ((f-f0)^2 + (G/2)^2) + B inside a frequency window.

    weighting='none' is an unweighted fit; 'model' applies two rounds of
    inverse-model reweighting, appropriate for power spectra whose noise
    scales with the local spectral density.
    """
    if weighting not in ("none", "model"):
        raise ValueError("weighting must be 'none' or 'model'")
    f = spectrum.frequencies
    y = spectrum.amplitudes
    if not f[0] <= center_guess <= f[-1]:
        raise ValueError("center_guess outside the spectrum range")
    sel = np.abs(f - center_guess) <= 0.5 * window
    if int(sel.sum()) < 8:
        raise ValueError("fit window must contain at least 8 spectrum points")
    fw = f[sel]
    yw = y[sel]

    # initialization: offset at the floor, centre at the strongest point
    # (np.argmax takes the first maximum, i.e. the lowest frequency on ties)
    p0 = np.array([yw.max() - yw.min(), fw[np.argmax(yw)], window / 5.0,
                   yw.min()])

    def residual(p, w=None):
        r = lorentzian(fw, p[0], p[1], p[2], p[3]) - yw
        return r if w is None else r * w

    res = least_squares(residual, p0, method="lm", xtol=1e-8, max_nfev=200)
    if res.x[0] < 0:
        # negative amplitude is not a line; refit with A clamped
        res = least_squares(
            residual, np.array([0.0, p0[1], p0[2], p0[3]]), method="trf",
            bounds=([0.0, fw[0], 0.0, -np.inf],
                    [np.inf, fw[-1], np.inf, np.inf]),
            xtol=1e-8, max_nfev=200)
    weights = None
    if weighting == "model":
        p = res.x
        for _ in range(2):
            floor = abs(p[3]) + 1e-300
            weights = 1.0 / np.maximum(lorentzian(fw, *p), floor)
            res = least_squares(residual, p, kwargs={"w": weights},
                                method="lm", xtol=1e-8, max_nfev=200)
            p = res.x
    if res.status == 0:
        raise FitConvergenceError(
            "Lorentzian fit hit the iteration limit", last_params=res.x)
    amp, f0, fwhm, off = res.x
    fwhm = abs(fwhm)
    if not (fw[0] <= f0 <= fw[-1]):
        raise FitConvergenceError(
            "fitted centre left the window", last_params=res.x)
    cov = _covariance(res)
    spread = float(np.sum((yw - yw.mean()) ** 2))
    raw = lorentzian(fw, *res.x) - yw
    residual_norm = float(np.sqrt(np.sum(raw**2) / spread)) if spread > 0 else 0.0
    return LorentzianFit(
        center_f0=float(f0), fwhm=float(fwhm), amplitude=float(amp),
        offset=float(off), sigma_f0=float(np.sqrt(abs(cov[1, 1]))),
        sigma_fwhm=float(np.sqrt(abs(cov[2, 2]))),
        residual_norm=residual_norm, converged=True, weighting=weighting,
    )


def triggered_histogram(stream, window, bin_width):
    """Histogram photon arrival times relative to the most recent trigger.

    window: (offset_s, length_s) after each trigger; bins are half-open
    [offset + k b, offset + (k+1) b).  Photons arriving before the first
    trigger are ignored but counted in n_pre_trigger.
    """
    offset, length = float(window[0]), float(window[1])
    if length <= 0 or bin_width <= 0:
        raise ValueError("window length and bin_width must be positive")
    trig = stream.trigger_timestamps()
    if trig.size == 0:
        raise TriggerError("stream contains no trigger records")
    photons = stream.photon_timestamps()
    idx = np.searchsorted(trig, photons, side="right") - 1
    pre = int(np.count_nonzero(idx < 0))
    valid = idx >= 0
    rel = (photons[valid] - trig[idx[valid]]) * 1e-12
    nbins = int(round(length / bin_width))
    if nbins < 1:
        raise ValueError("window shorter than one bin")
    k = np.floor((rel - offset) / bin_width).astype(np.int64)
    inside = (k >= 0) & (k < nbins)
    counts = np.bincount(k[inside], minlength=nbins)
    return TriggeredHistogram(
        counts=counts.astype(np.int64), bin_width=float(bin_width),
        window=(offset, length), n_triggers=int(trig.size),
        n_pre_trigger=pre,
    )


def _wrap_phase(phi):
    """Wrap to (-pi, pi]."""
    out = math.fmod(phi + math.pi, 2 * math.pi)
    if out <= 0:
        out += 2 * math.pi
    return out - math.pi


def fit_sine(hist, frequency_guess):
    """Fit C + A sin(2 pi f tau + phi) to a triggered histogram.

    The frequency floats within +-5% of the guess.  reference_time is the
    earliest rising zero crossing of the fitted sine inside the window,
    in seconds after the trigger.
    """
    if frequency_guess <= 0:
        raise ValueError("frequency_guess must be positive")
    offset_t, length = hist.window
    if length * frequency_guess < 3:
        raise ValueError("window must span at least 3 oscillation periods")
    tau = hist.tau_centers()
    y = hist.counts.astype(np.float64)
    tloc = tau - offset_t

    c0 = y.mean()
    z = np.sum((y - c0) * np.exp(-2j * np.pi * frequency_guess * tloc))
    a0 = 2.0 * abs(z) / y.size
    phi0 = _wrap_phase(float(np.angle(z)) + 0.5 * math.pi)
    p0 = np.array([c0, a0, frequency_guess, phi0])

    def residual(p):
        return p[0] + p[1] * np.sin(2 * np.pi * p[2] * tloc + p[3]) - y

    res = least_squares(
        residual, p0, method="trf",
        bounds=([-np.inf, 0.0, 0.95 * frequency_guess, -2 * math.pi],
                [np.inf, np.inf, 1.05 * frequency_guess, 2 * math.pi]),
        xtol=1e-10, max_nfev=400)
    if res.status == 0:
        raise FitConvergenceError("sine fit hit the iteration limit",
                                  last_params=res.x)
    c, a, freq, phi = res.x
    cov = _covariance(res)
    sig = np.sqrt(np.abs(np.diag(cov)))
    if a < 2.0 * sig[1]:
        raise NoOscillationError(
            f"amplitude {a:.3g} consistent with zero at 2 sigma ({sig[1]:.3g})")

    # earliest rising zero crossing: 2 pi f t + phi = 2 pi m, t >= 0 (local)
    m = math.ceil(phi / (2 * math.pi) - 1e-12)
    t_loc = (m - phi / (2 * math.pi)) / freq
    t_ref = offset_t + t_loc
    dt_dphi = -1.0 / (2 * math.pi * freq)
    dt_df = -t_loc / freq
    var_t = (dt_dphi**2 * cov[3, 3] + dt_df**2 * cov[2, 2]
             + 2.0 * dt_dphi * dt_df * cov[2, 3])
    return SineFit(
        amplitude=float(a), phase=_wrap_phase(float(phi)), offset=float(c),
        frequency=float(freq), reference_time=float(t_ref),
        sigma_amplitude=float(sig[1]), sigma_phase=float(sig[3]),
        sigma_offset=float(sig[0]), sigma_frequency=float(sig[2]),
        sigma_reference_time=float(math.sqrt(max(var_t, 0.0))),
        window=(offset_t, length),
    )


def phase_frequency_estimate(fit1, fit2, coarse_frequency,
                             ambiguity_margin=0.35):
    """Oscillation frequency from two equal-phase instants.

    The reference times of the two sine fits mark the same oscillation
    phase, so the elapsed time is an integer number n of periods; n is
    resolved with the coarse frequency and the result is n / (t2 - t1).
    """
    t1, t2 = fit1.reference_time, fit2.reference_time
    if t2 <= t1:
        raise ValueError("fit2 must reference a later time than fit1")
    dt = t2 - t1
    x = coarse_frequency * dt
    n = int(round(x))
    if n < 1:
        raise AmbiguityError("reference times are less than one period apart")
    if abs(x - n) > ambiguity_margin:
        raise AmbiguityError(
            "cycle count ambiguous: the coarse frequency must be accurate "
            f"to better than {0.5 / dt:.3g} Hz over the {dt:.3g} s baseline")
    freq = n / dt
    sigma = n * math.sqrt(fit1.sigma_reference_time**2
                          + fit2.sigma_reference_time**2) / dt**2
    return PhaseFrequencyEstimate(t1=float(t1), t2=float(t2), n_cycles=n,
                                  frequency=float(freq),
                                  sigma_frequency=float(sigma))
