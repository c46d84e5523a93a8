"""Two-photon correlation histograms and motional power spectra.

The lag histogram counts ordered photon pairs over all detector
channels combined (the two detectors are treated as one); the motional
spectrum is the discrete Fourier transform of the mean-subtracted
histogram.  Histogramming over an index partition is bit-identical to
the sequential result, so large streams can be spread over worker
threads.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .simulator import TagStream


class OrderingError(ValueError):
    """Input stream is not sorted by timestamp."""


@dataclass
class CorrelationHistogram:
    bin_width: float            # s (quantized to integer picoseconds)
    max_lag: float              # s
    counts: np.ndarray          # int64, length ceil(max_lag / bin_width)
    n_source_events: int
    acquisition_span: float     # s
    warning: str = ""

    @property
    def n_bins(self):
        return self.counts.size

    def lag_centers(self):
        """Centre of each lag bin in seconds."""
        return (np.arange(self.n_bins) + 0.5) * self.bin_width

    def normalized(self):
        """Counts scaled by the uncorrelated-pair expectation (g2 units)."""
        if self.n_source_events < 2 or self.acquisition_span <= 0:
            return self.counts.astype(float)
        mu = (self.n_source_events ** 2 * self.bin_width
              / self.acquisition_span)
        return self.counts / mu


@dataclass
class PowerSpectrum:
    frequencies: np.ndarray     # Hz, 0 .. 1 / (2 bin_width)
    amplitudes: np.ndarray      # |DFT| or |DFT|^2 of the mean-subtracted counts
    mode: str = "magnitude"     # 'magnitude' or 'power'
    window: str = "rectangular"
    meta: dict = field(default_factory=dict)

    @property
    def resolution(self):
        return float(self.frequencies[1] - self.frequencies[0])


@dataclass
class NoiseToSignalEntry:
    max_lag: float
    signal: float
    noise: float
    ratio: float


@dataclass
class NoiseToSignalReport:
    entries: list
    bin_width: float
    noise_band: tuple

    def best(self):
        return min(self.entries, key=lambda e: e.ratio)


@dataclass
class PeakDetection:
    candidates: list            # (frequency_hz, amplitude), amplitude desc
    threshold: float
    noise_mean: float
    noise_std: float
    noise_band_masked: bool = False

    def frequencies(self):
        return [f for f, _ in self.candidates]


def _photon_times_ps(stream):
    if isinstance(stream, TagStream):
        ts = stream.photon_timestamps()
    else:
        ts = np.ascontiguousarray(stream, dtype=np.int64)
    if ts.size > 1 and np.any(np.diff(ts) < 0):
        raise OrderingError("time tags must be sorted in ascending order")
    return ts


def _spans(stream, ts):
    if isinstance(stream, TagStream) and stream.duration > 0:
        return stream.duration
    if ts.size >= 2:
        return (ts[-1] - ts[0]) * 1e-12
    return 0.0


def correlation_histogram(stream, bin_width, max_lag, workers=1,
                          _kernels_override=None):
    """Histogram of photon-pair lags in (k*bin, (k+1)*bin], k < ceil(max_lag/bin).

    stream may be a TagStream (trigger records are excluded) or a sorted
    int64 picosecond array.  workers > 1 partitions the pair loop over
    threads; the merged result is identical to the sequential one.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    if max_lag < bin_width:
        raise ValueError("max_lag must be at least one bin_width")
    bin_ps = int(round(bin_width * 1e12))
    if bin_ps < 1:
        raise ValueError("bin_width is below the 1 ps timestamp resolution")
    maxlag_ps = int(round(max_lag * 1e12))
    nbins = int(math.ceil(maxlag_ps / bin_ps))
    kern = (_kernels_override or {}).get("pair_histogram",
                                         _kernels.pair_histogram)

    ts = _photon_times_ps(stream)
    span = _spans(stream, ts)
    if ts.size < 2:
        return CorrelationHistogram(
            bin_width=bin_ps * 1e-12, max_lag=max_lag,
            counts=np.zeros(nbins, dtype=np.int64),
            n_source_events=int(ts.size), acquisition_span=span,
            warning="fewer than two photon records; histogram is empty",
        )

    n = ts.size
    workers = max(int(workers), 1)
    if workers == 1:
        counts = kern(ts, 0, n, nbins, bin_ps)
    else:
        bounds = np.linspace(0, n, workers + 1).astype(np.int64)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(
                lambda ab: kern(ts, int(ab[0]), int(ab[1]), nbins, bin_ps),
                zip(bounds[:-1], bounds[1:]),
            ))
        counts = np.sum(parts, axis=0)
    return CorrelationHistogram(
        bin_width=bin_ps * 1e-12, max_lag=max_lag, counts=counts,
        n_source_events=n, acquisition_span=span,
    )


def power_spectrum(hist, window="rectangular", mode="magnitude"):
    """|DFT| (or |DFT|^2) of the mean-subtracted correlation histogram."""
    if hist.n_bins == 0:
        raise ValueError("histogram is empty")
    if window not in ("rectangular", "hann"):
        raise ValueError("window must be 'rectangular' or 'hann'")
    if mode not in ("magnitude", "power"):
        raise ValueError("mode must be 'magnitude' or 'power'")
    x = hist.counts.astype(np.float64)
    x = x - x.mean()
    if window == "hann":
        x = x * np.hanning(x.size)
    amp = np.abs(np.fft.rfft(x))
    if mode == "power":
        amp = amp**2
    freqs = np.fft.rfftfreq(hist.n_bins, d=hist.bin_width)
    return PowerSpectrum(frequencies=freqs, amplitudes=amp, mode=mode,
                         window=window,
                         meta={"bin_width": hist.bin_width,
                               "max_lag": hist.max_lag,
                               "n_source_events": hist.n_source_events})


def averaged_spectrum(stream, bin_width, max_lag, n_segments=10,
                      window="rectangular", mode="magnitude", workers=1,
                      _kernels_override=None):
    """Average the spectra of n_segments equal-time slices of the stream.

    Averaging trades nothing in total pair count but turns the heavy-tailed
    single-spectrum statistics into near-Gaussian ones, which is what the
    sigma-threshold peak search expects.  n_segments=1 reduces to
    power_spectrum(correlation_histogram(...)).
    """
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    ts = _photon_times_ps(stream)
    span = _spans(stream, ts)
    if ts.size < 2:
        hist = correlation_histogram(stream, bin_width, max_lag,
                                     _kernels_override=_kernels_override)
        return power_spectrum(hist, window=window, mode=mode)
    t0 = ts[0]
    t1 = ts[-1] + 1
    edges = np.linspace(t0, t1, n_segments + 1).astype(np.int64)
    acc = None
    freqs = None
    for s in range(n_segments):
        seg = ts[(ts >= edges[s]) & (ts < edges[s + 1])]
        hist = correlation_histogram(seg, bin_width, max_lag, workers=workers,
                                     _kernels_override=_kernels_override)
        spec = power_spectrum(hist, window=window, mode=mode)
        acc = spec.amplitudes if acc is None else acc + spec.amplitudes
        freqs = spec.frequencies
    return PowerSpectrum(
        frequencies=freqs, amplitudes=acc / n_segments, mode=mode,
        window=window,
        meta={"bin_width": bin_width, "max_lag": max_lag,
              "n_segments": n_segments, "n_source_events": int(ts.size),
              "acquisition_span": span},
    )


def detect_peaks(spectrum, threshold_sigma=5.0, noise_band=(2e6, 3e6),
                 min_separation=2e3, smooth_bins=3):
    """Local maxima above mean + threshold_sigma * std of the noise band.

    The threshold statistic is evaluated on a smooth_bins-wide moving
    average of the amplitudes (matched to the few-hundred-Hz motional
    line widths at typical resolutions); this keeps the sigma threshold
    meaningful where a raw single-bin amplitude has heavy tails.
    Candidates closer than min_separation keep only the strongest; if a
    detected peak falls inside the noise band, the band statistics are
    re-estimated with the peak neighbourhoods masked and the detection is
    flagged.
    """
    f = spectrum.frequencies
    a = spectrum.amplitudes
    if smooth_bins > 1:
        kernel = np.ones(int(smooth_bins)) / int(smooth_bins)
        a = np.convolve(a, kernel, mode="same")
    lo, hi = noise_band
    if lo >= hi or lo < f[0] or hi > f[-1]:
        raise ValueError("noise_band must lie within the spectrum range")
    band = (f >= lo) & (f <= hi)

    def run(mask_extra=None):
        sel = band if mask_extra is None else band & ~mask_extra
        mu = float(a[sel].mean())
        sd = float(a[sel].std())
        thr = mu + threshold_sigma * sd
        interior = np.zeros(a.size, dtype=bool)
        interior[1:-1] = (a[1:-1] > a[:-2]) & (a[1:-1] >= a[2:])
        idx = np.flatnonzero(interior & (a > thr) & (f > 0))
        idx = idx[np.argsort(a[idx])[::-1]]
        chosen = []
        for i in idx:
            if all(abs(f[i] - f[j]) >= min_separation for j in chosen):
                chosen.append(i)
        return chosen, mu, sd, thr

    chosen, mu, sd, thr = run()
    masked = False
    if any(lo <= f[i] <= hi for i in chosen):
        mask = np.zeros(a.size, dtype=bool)
        width = 3 * min_separation
        for i in chosen:
            mask |= np.abs(f - f[i]) <= width
        chosen, mu, sd, thr = run(mask_extra=mask)
        masked = True
    return PeakDetection(
        candidates=[(float(f[i]), float(a[i])) for i in chosen],
        threshold=thr, noise_mean=mu, noise_std=sd, noise_band_masked=masked,
    )


def noise_to_signal_scan(stream, max_lags, bin_width, noise_band=(2e6, 3e6),
                         window="rectangular", mode="magnitude", workers=1,
                         _kernels_override=None):
    """Noise-to-signal ratio of the spectrum for each maximum lag.

    Signal is the highest spectral amplitude (f > 0), noise the standard
    deviation of the amplitudes inside noise_band.
    """
    for ml in max_lags:
        if ml < 10 * bin_width:
            raise ValueError("every max_lag must be at least 10 bin widths")
    entries = []
    for ml in max_lags:
        hist = correlation_histogram(stream, bin_width, ml, workers=workers,
                                     _kernels_override=_kernels_override)
        spec = power_spectrum(hist, window=window, mode=mode)
        f, a = spec.frequencies, spec.amplitudes
        signal = float(a[f > 0].max())
        band = (f >= noise_band[0]) & (f <= noise_band[1])
        noise = float(a[band].std())
        entries.append(NoiseToSignalEntry(
            max_lag=float(ml), signal=signal, noise=noise,
            ratio=noise / signal if signal > 0 else math.inf,
        ))
    return NoiseToSignalReport(entries=entries, bin_width=bin_width,
                               noise_band=tuple(noise_band))
