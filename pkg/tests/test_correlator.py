import numpy as np
import pytest

from ionmotion import _kernels
from ionmotion.correlator import (OrderingError, averaged_spectrum,
                                  correlation_histogram, detect_peaks,
                                  noise_to_signal_scan, power_spectrum)
from ionmotion.simulator import TagStream


def brute_force_histogram(ts, nbins, bin_ps):
    """Oracle: enumerate every ordered pair, assign bins via edge search.

    Bin k covers (k*bin_ps, (k+1)*bin_ps]; searchsorted on the left edge
    array implements the half-open-from-the-left convention directly.
    """
    edges = np.arange(nbins + 1, dtype=np.int64) * bin_ps
    counts = np.zeros(nbins, dtype=np.int64)
    n = ts.size
    for i in range(n):
        lags = ts[i + 1:] - ts[i]
        lags = lags[(lags > 0) & (lags <= edges[-1])]
        if lags.size:
            k = np.searchsorted(edges, lags, side="left") - 1
            counts += np.bincount(k, minlength=nbins)
    return counts


def random_stream(rng, n, span_ps):
    return np.sort(rng.integers(0, span_ps, size=n)).astype(np.int64)


def as_stream(ts_ps, channels=None, duration=None):
    ch = (np.zeros(ts_ps.size, dtype=np.uint8) if channels is None
          else channels)
    dur = duration if duration is not None else float(ts_ps[-1] + 1) * 1e-12
    return TagStream(timestamps=ts_ps, channels=ch, duration=dur)


class TestHistogram:
    def test_single_pair_bin_index(self):
        # tags at 0 and 100 ns with 8 ns bins: lag 100 ns lies in
        # (96, 104] ns, bin index 12
        ts = np.array([0, 100_000], dtype=np.int64)
        hist = correlation_histogram(as_stream(ts), 8e-9, 1e-6)
        assert hist.counts.sum() == 1
        assert hist.counts[12] == 1

    def test_boundary_lags_land_left_closed_right_open(self):
        # lag exactly k*bin belongs to bin k-1; lag k*bin + 1 to bin k
        ts = np.array([0, 16_000], dtype=np.int64)
        hist = correlation_histogram(as_stream(ts), 16e-9, 1e-6)
        assert hist.counts[0] == 1
        ts = np.array([0, 16_001], dtype=np.int64)
        hist = correlation_histogram(as_stream(ts), 16e-9, 1e-6)
        assert hist.counts[1] == 1

    def test_zero_lag_pairs_skipped(self):
        ts = np.array([5_000, 5_000, 9_000], dtype=np.int64)
        ch = np.array([0, 1, 0], dtype=np.uint8)
        hist = correlation_histogram(as_stream(ts, ch), 1e-9, 1e-7)
        assert hist.counts.sum() == 2  # the two 4 us lags, not the tie

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(50, 4000))
        ts = random_stream(rng, n, span_ps=int(5e7))
        bin_ps = int(rng.choice([8000, 16000, 32000]))
        nbins = int(rng.integers(10, 200))
        hist = correlation_histogram(as_stream(ts), bin_ps * 1e-12,
                                     nbins * bin_ps * 1e-12)
        oracle = brute_force_histogram(ts, nbins, bin_ps)
        assert np.array_equal(hist.counts, oracle)
        assert hist.counts.sum() == oracle.sum()

    def test_empty_stream_warns(self):
        hist = correlation_histogram(
            as_stream(np.empty(0, dtype=np.int64), duration=1.0), 16e-9, 1e-3)
        assert hist.counts.sum() == 0
        assert "empty" in hist.warning

    def test_unsorted_rejected(self):
        ts = np.array([100, 50], dtype=np.int64)
        with pytest.raises(OrderingError):
            correlation_histogram(ts, 16e-9, 1e-3)

    def test_linearity_of_separated_streams(self):
        rng = np.random.default_rng(7)
        a = random_stream(rng, 500, int(1e9))
        b = random_stream(rng, 500, int(1e9)) + int(5e9)  # > max_lag gap
        cat = np.concatenate([a, b])
        args = (16e-9, 1e-3)
        ha = correlation_histogram(as_stream(a, duration=1.0), *args)
        hb = correlation_histogram(as_stream(b - int(5e9), duration=1.0), *args)
        hcat = correlation_histogram(as_stream(cat, duration=6.0), *args)
        assert np.array_equal(hcat.counts, ha.counts + hb.counts)

    def test_partitioned_parallel_bit_identical(self):
        rng = np.random.default_rng(11)
        ts = random_stream(rng, 30_000, int(1e10))
        seq = correlation_histogram(as_stream(ts), 16e-9, 2e-3, workers=1)
        par = correlation_histogram(as_stream(ts), 16e-9, 2e-3, workers=3)
        assert np.array_equal(seq.counts, par.counts)

    def test_backend_parity(self):
        rng = np.random.default_rng(13)
        ts = random_stream(rng, 20_000, int(5e9))
        n = ts.size
        want = None
        for backend in ("numba", "numpy"):
            kern = _kernels.get_kernels(backend)["pair_histogram"]
            got = kern(ts, 0, n, 1000, 16000)
            if want is None:
                want = got
            assert np.array_equal(want, got)

    def test_normalized_accessor_near_one_for_poisson(self):
        rng = np.random.default_rng(3)
        ts = random_stream(rng, 50_000, int(1e12))  # 1 s at 5e4/s
        hist = correlation_histogram(as_stream(ts, duration=1.0), 32e-9, 1e-3)
        g2 = hist.normalized()
        assert abs(g2.mean() - 1.0) < 0.05


class TestDeadTimeKernel:
    def test_sequential_semantics(self):
        # 0, 50, 120 ns with 100 ns dead time: 50 censored, 120 kept
        ts = np.array([0, 50_000, 120_000], dtype=np.int64)
        for backend in ("numba", "numpy"):
            keep = _kernels.get_kernels(backend)["dead_time_keep"](ts, 100_000)
            assert keep.tolist() == [True, False, True]

    @pytest.mark.parametrize("seed", range(4))
    def test_backend_parity_random(self, seed):
        rng = np.random.default_rng(seed)
        ts = np.sort(rng.integers(0, 2_000_000, size=3000)).astype(np.int64)
        a = _kernels.get_kernels("numba")["dead_time_keep"](ts, 700)
        b = _kernels.get_kernels("numpy")["dead_time_keep"](ts, 700)
        assert np.array_equal(a, b)
        kept = ts[a]
        assert np.all(np.diff(kept) >= 700)


class TestSpectrum:
    def test_synthetic_tone_peak_within_one_bin(self):
        bin_w = 16e-9
        nbins = 312_500  # 5 ms
        k = np.arange(nbins)
        f0 = 1.665e6
        counts = np.round(1000 * (1 + np.cos(2 * np.pi * f0 * k * bin_w)))
        hist = correlation_histogram(
            np.array([0, 1000], dtype=np.int64), bin_w, 5e-3)
        hist.counts = counts.astype(np.int64)
        spec = power_spectrum(hist)
        peak = spec.frequencies[np.argmax(spec.amplitudes)]
        assert abs(peak - f0) <= spec.resolution

    @pytest.mark.parametrize("seed", range(20))
    def test_random_tone_frequency_axis(self, seed):
        rng = np.random.default_rng(seed)
        bin_w = 16e-9
        nbins = 62_500
        nyquist = 1 / (2 * bin_w)
        f0 = rng.uniform(0.05, 0.95) * nyquist
        k = np.arange(nbins)
        counts = np.round(500 * (1 + np.cos(2 * np.pi * f0 * k * bin_w)))
        hist = correlation_histogram(np.array([0, 1000], dtype=np.int64),
                                     bin_w, nbins * bin_w)
        hist.counts = counts.astype(np.int64)
        spec = power_spectrum(hist)
        peak = spec.frequencies[np.argmax(spec.amplitudes)]
        assert abs(peak - f0) <= spec.resolution

    def test_constant_counts_zero_spectrum(self):
        hist = correlation_histogram(np.array([0, 1000], dtype=np.int64),
                                     16e-9, 1e-4)
        hist.counts = np.full(hist.n_bins, 41, dtype=np.int64)
        spec = power_spectrum(hist)
        assert np.allclose(spec.amplitudes, 0.0)

    def test_power_mode_squares(self):
        hist = correlation_histogram(np.array([0, 1000], dtype=np.int64),
                                     16e-9, 1e-4)
        hist.counts = np.arange(hist.n_bins, dtype=np.int64)
        mag = power_spectrum(hist, mode="magnitude")
        pw = power_spectrum(hist, mode="power")
        assert np.allclose(pw.amplitudes, mag.amplitudes**2)

    def test_hann_window_accepted(self):
        hist = correlation_histogram(np.array([0, 1000], dtype=np.int64),
                                     16e-9, 1e-4)
        hist.counts = np.ones(hist.n_bins, dtype=np.int64)
        spec = power_spectrum(hist, window="hann")
        assert np.all(spec.amplitudes >= 0)


def synthetic_spectrum(rng, nbins=31250, resolution=200.0, n_avg=10,
                       peaks=()):
    """Averaged-magnitude-like noise plus injected Lorentzian lines."""
    noise = np.abs(rng.normal(size=(n_avg, nbins))
                   + 1j * rng.normal(size=(n_avg, nbins))).mean(axis=0)
    f = np.arange(nbins) * resolution
    amp = noise.copy()
    for f0, height, fwhm in peaks:
        amp += height * (fwhm / 2) ** 2 / ((f - f0) ** 2 + (fwhm / 2) ** 2)
    from ionmotion.correlator import PowerSpectrum
    return PowerSpectrum(frequencies=f, amplitudes=amp)


class TestDetectPeaks:
    def test_noise_only_empty(self):
        spec = synthetic_spectrum(np.random.default_rng(0))
        det = detect_peaks(spec, threshold_sigma=5.0)
        assert det.candidates == []

    def test_recovers_injected_peaks(self):
        rng = np.random.default_rng(1)
        truth = [(0.711e6, 30.0, 800.0), (1.232e6, 18.0, 800.0),
                 (1.665e6, 40.0, 800.0)]
        spec = synthetic_spectrum(rng, peaks=truth)
        # modes sit tens of kHz apart; 10 kHz separation merges the noise
        # bumps riding on the line tails into their parent peak
        det = detect_peaks(spec, threshold_sigma=5.0, min_separation=10e3)
        assert len(det.candidates) == 3
        found = sorted(det.frequencies())
        for f0, f in zip(sorted(t[0] for t in truth), found):
            assert abs(f0 - f) < 1e3

    def test_noise_band_overlap_reestimates(self):
        rng = np.random.default_rng(2)
        spec = synthetic_spectrum(rng, peaks=[(2.5e6, 50.0, 800.0)])
        det = detect_peaks(spec, threshold_sigma=5.0)
        assert det.noise_band_masked
        assert any(abs(f - 2.5e6) < 1e3 for f in det.frequencies())

    def test_band_outside_spectrum_rejected(self):
        spec = synthetic_spectrum(np.random.default_rng(3), nbins=5000)
        with pytest.raises(ValueError):
            detect_peaks(spec, noise_band=(2e6, 3e6))

    def test_separation_keeps_strongest(self):
        rng = np.random.default_rng(4)
        spec = synthetic_spectrum(rng, peaks=[(1.0e6, 40.0, 400.0),
                                              (1.0012e6, 25.0, 400.0)])
        det = detect_peaks(spec, threshold_sigma=5.0, min_separation=2e3)
        close = [f for f in det.frequencies() if abs(f - 1.0e6) < 3e3]
        assert len(close) == 1


class TestNoiseToSignal:
    def test_lag_precondition(self):
        ts = np.arange(100, dtype=np.int64) * 1_000_000
        with pytest.raises(ValueError):
            noise_to_signal_scan(as_stream(ts), [1e-7], 16e-9)

    def test_report_fields(self):
        rng = np.random.default_rng(5)
        ts = random_stream(rng, 40_000, int(2e12))
        rep = noise_to_signal_scan(as_stream(ts, duration=2.0),
                                   [0.5e-3, 1e-3], 32e-9)
        assert len(rep.entries) == 2
        for e in rep.entries:
            assert e.ratio == pytest.approx(e.noise / e.signal)
        assert rep.best().ratio == min(e.ratio for e in rep.entries)


class TestAveragedSpectrum:
    def test_single_segment_matches_power_spectrum(self):
        rng = np.random.default_rng(6)
        ts = random_stream(rng, 20_000, int(1e12))
        stream = as_stream(ts, duration=1.0)
        a = averaged_spectrum(stream, 32e-9, 0.5e-3, n_segments=1)
        hist = correlation_histogram(stream, 32e-9, 0.5e-3)
        b = power_spectrum(hist)
        assert np.allclose(a.amplitudes, b.amplitudes)

    def test_segments_reduce_band_std(self):
        rng = np.random.default_rng(7)
        ts = random_stream(rng, 120_000, int(3e12))
        stream = as_stream(ts, duration=3.0)
        one = averaged_spectrum(stream, 32e-9, 0.5e-3, n_segments=1)
        ten = averaged_spectrum(stream, 32e-9, 0.5e-3, n_segments=10)
        band = (one.frequencies >= 2e6) & (one.frequencies <= 3e6)
        assert ten.amplitudes[band].std() < 0.6 * one.amplitudes[band].std()
