"""Trapped-ion chain motion from single-photon interference correlations.

Simulates time-tagged fluorescence photon streams from an ion-mirror
interferometer (continuous cooling or pulsed excitation) and extracts
the motional mode frequencies by correlation spectroscopy and
phase-sensitive estimation.
"""

__version__ = "0.1.0"

from ._backend import BACKEND, USING_NUMBA
from .modes import (DEFAULT_AMPLITUDES, DEFAULT_FWHM, Mode, ModeSet,
                    StabilityError, TrapConfig, compute_normal_modes,
                    equilibrium_separation)
from .simulator import (CapacityError, DetectorConfig, InterferometerConfig,
                        MirrorTrajectory, MotionState, TagStream,
                        TRIGGER_CHANNEL, apply_mirror_frequency_shift,
                        instantaneous_rate, mirror_drift_and_feedback,
                        mode_path_couplings, path_projection, pulsed_rate,
                        simulate_pulsed_stream, simulate_thermal_stream)
from .correlator import (CorrelationHistogram, NoiseToSignalReport,
                         OrderingError, PeakDetection, PowerSpectrum,
                         averaged_spectrum, correlation_histogram,
                         detect_peaks, noise_to_signal_scan, power_spectrum)
from .fitting import (AmbiguityError, FitConvergenceError, LorentzianFit,
                      NoOscillationError, PhaseFrequencyEstimate, SineFit,
                      TriggeredHistogram, TriggerError, fit_lorentzian,
                      fit_sine, lorentzian, phase_frequency_estimate,
                      triggered_histogram)
from .tagfile import (FormatError, TagFileReader, import_vendor_tcspc,
                      read_tagfile, write_tagfile)
from .config import ConfigError, RunConfig, default_config_text, load_config, parse_quantity
