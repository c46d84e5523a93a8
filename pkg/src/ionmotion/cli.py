"""Command-line front end.

Verbs: simulate, spectrum, fit, nsr, pulsed, report.  All numeric flags
accept SI-suffixed strings ("16ns", "5ms", "1.6465MHz").  Exit codes:
0 success, 1 I/O failure, 2 invalid configuration or input; errors are
reported as one JSON object on stderr.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .config import ConfigError, load_config, parse_quantity
from .correlator import (averaged_spectrum, correlation_histogram,
                         noise_to_signal_scan, power_spectrum, PowerSpectrum)
from .fitting import (AmbiguityError, FitConvergenceError, NoOscillationError,
                      TriggerError, fit_lorentzian, fit_sine,
                      phase_frequency_estimate, triggered_histogram)
from .simulator import (CapacityError, simulate_pulsed_stream,
                        simulate_thermal_stream)
from .tagfile import FormatError, read_tagfile, write_tagfile

_INPUT_ERRORS = (ConfigError, FormatError, CapacityError, TriggerError,
                 AmbiguityError, NoOscillationError, FitConvergenceError,
                 ValueError, KeyError)


def _fail(exc, code):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload), file=sys.stderr)
    return code


def _warn(message):
    print(f"warning: {message}", file=sys.stderr)


def _write_csv(path, header, columns, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in header.items():
            fh.write(f"# {key} = {value}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def _read_spectrum_csv(path):
    header = {}
    freqs = []
    amps = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "=" in line:
                    key, _, value = line[1:].partition("=")
                    header[key.strip()] = value.strip()
                continue
            if line.startswith("freq_hz"):
                continue
            f, a = line.split(",")
            freqs.append(float(f))
            amps.append(float(a))
    if not freqs:
        raise FormatError(f"{path}: no spectrum rows found")
    return PowerSpectrum(
        frequencies=np.asarray(freqs), amplitudes=np.asarray(amps),
        mode=header.get("mode", "magnitude"),
        window=header.get("window", "rectangular"), meta=header,
    )


def _json_dump(path, payload):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------


def cmd_simulate(args):
    cfg = load_config(args.config)
    duration = (parse_quantity(args.duration, "time", "--duration")
                if args.duration is not None else cfg.duration)
    seed = args.seed if args.seed is not None else cfg.seed
    regime = args.regime
    if duration == 0:
        from .simulator import TagStream
        stream = TagStream(timestamps=np.empty(0, dtype=np.int64),
                           channels=np.empty(0, dtype=np.uint8),
                           duration=0.0, meta={"regime": regime, "seed": seed})
        _warn("duration is zero; writing a header-only file")
    elif regime == "thermal":
        stream = simulate_thermal_stream(
            cfg.trap, cfg.mode_set(), cfg.interferometer, cfg.detectors,
            duration, seed, drift_rms_per_s=cfg.drift_rms,
            feedback_period=cfg.feedback_period,
            feedback_gain=cfg.feedback_gain, feedback=cfg.feedback,
            memory_budget=cfg.memory_budget)
    else:
        repetitions = int(round(duration / cfg.protocol.repetition_period))
        if repetitions < 1:
            raise ConfigError("simulation.duration shorter than one "
                              "pulsed repetition period")
        stream = simulate_pulsed_stream(
            cfg.protocol, cfg.pulsed_windows, repetitions,
            cfg.interferometer, cfg.detectors, seed,
            memory_budget=cfg.memory_budget)
        if stream.warning:
            _warn(stream.warning)
    n = write_tagfile(args.output, stream)
    photons = int(np.count_nonzero(stream.photon_mask))
    mean_rate = photons / duration if duration > 0 else 0.0
    print(f"wrote {args.output}: {n} records ({photons} photons), "
          f"duration {duration:g} s, mean rate {mean_rate:.1f} /s")
    return 0


def cmd_spectrum(args):
    stream = read_tagfile(args.tagfile)
    bin_width = parse_quantity(args.bin, "time", "--bin")
    max_lag = parse_quantity(args.max_lag, "time", "--max-lag")
    mode = "power" if args.power else "magnitude"
    workers = args.workers or (os.cpu_count() or 1)
    if args.segments > 1:
        spec = averaged_spectrum(stream, bin_width, max_lag,
                                 n_segments=args.segments, window=args.window,
                                 mode=mode, workers=workers)
        n_events = spec.meta.get("n_source_events", stream.n_records)
    else:
        hist = correlation_histogram(stream, bin_width, max_lag,
                                     workers=workers)
        if hist.warning:
            _warn(hist.warning)
        spec = power_spectrum(hist, window=args.window, mode=mode)
        n_events = hist.n_source_events
    _write_csv(
        args.output,
        {
            "ionmotion": "spectrum",
            "version": __version__,
            "source": args.tagfile,
            "bin_width_s": repr(bin_width),
            "max_lag_s": repr(max_lag),
            "segments": args.segments,
            "window": args.window,
            "mode": mode,
            "n_source_events": n_events,
        },
        ("freq_hz", "amplitude"),
        zip(spec.frequencies.tolist(), spec.amplitudes.tolist()),
    )
    print(f"wrote {args.output}: {spec.frequencies.size} frequency bins, "
          f"mode {mode}")
    return 0


def _parse_guess(text):
    if "=" in text:
        label, _, value = text.partition("=")
        return label.strip(), parse_quantity(value, "frequency", "--guess")
    return None, parse_quantity(text, "frequency", "--guess")


def cmd_fit(args):
    spec = _read_spectrum_csv(args.spectrum)
    window = parse_quantity(args.window, "frequency", "--window")
    weighting = args.weighting
    if weighting == "auto":
        weighting = "model" if spec.mode == "power" else "none"
    fits = []
    for i, guess in enumerate(args.guess):
        label, f_guess = _parse_guess(guess)
        fit = fit_lorentzian(spec, f_guess, window=window,
                             weighting=weighting)
        entry = {"label": label or f"peak{i + 1}", "guess_hz": f_guess}
        entry.update(fit.as_dict())
        fits.append(entry)
    payload = {
        "command": "fit",
        "source": args.spectrum,
        "window_hz": window,
        "weighting": weighting,
        "fits": fits,
    }
    _json_dump(args.output, payload)
    for entry in fits:
        print(f"{entry['label']}: f0 = {entry['center_f0_hz']:.1f} Hz "
              f"+- {entry['sigma_f0_hz']:.1f} Hz, "
              f"fwhm = {entry['fwhm_hz']:.0f} Hz")
    return 0


def cmd_nsr(args):
    stream = read_tagfile(args.tagfile)
    bin_width = parse_quantity(args.bin, "time", "--bin")
    lags = [parse_quantity(p, "time", "--lags")
            for p in args.lags.split(",") if p.strip()]
    workers = args.workers or (os.cpu_count() or 1)
    report = noise_to_signal_scan(stream, lags, bin_width, workers=workers)
    _write_csv(
        args.output,
        {
            "ionmotion": "nsr",
            "version": __version__,
            "source": args.tagfile,
            "bin_width_s": repr(bin_width),
            "noise_band_hz": "2e6..3e6",
        },
        ("max_lag_s", "signal", "noise", "ratio"),
        ((e.max_lag, e.signal, e.noise, e.ratio) for e in report.entries),
    )
    best = report.best()
    print(f"wrote {args.output}: minimum ratio {best.ratio:.4g} "
          f"at max_lag {best.max_lag:g} s")
    return 0


def cmd_pulsed(args):
    stream = read_tagfile(args.tagfile)
    bin_width = parse_quantity(args.bin, "time", "--bin")
    coarse = parse_quantity(args.coarse, "frequency", "--coarse")
    windows = []
    for item in args.windows.split(","):
        item = item.strip()
        if not item:
            continue
        start, _, length = item.partition(":")
        if not length:
            raise ConfigError(f"--windows entry {item!r} must be start:length")
        windows.append((parse_quantity(start, "time", "--windows"),
                        parse_quantity(length, "time", "--windows")))
    if len(windows) != 2:
        raise ConfigError("--windows must name exactly two windows")
    sine_fits = []
    hist_paths = []
    base, _ = os.path.splitext(args.output)
    for i, win in enumerate(windows):
        hist = triggered_histogram(stream, win, bin_width)
        fit = fit_sine(hist, coarse)
        sine_fits.append(fit)
        hist_path = f"{base}_hist{i}.csv"
        _write_csv(
            hist_path,
            {
                "ionmotion": "pulsed-histogram",
                "version": __version__,
                "source": args.tagfile,
                "window_s": f"{win[0]!r}:{win[1]!r}",
                "bin_width_s": repr(bin_width),
                "n_triggers": hist.n_triggers,
            },
            ("tau_s", "counts"),
            zip(hist.tau_centers().tolist(), hist.counts.tolist()),
        )
        hist_paths.append(hist_path)
    estimate = phase_frequency_estimate(sine_fits[0], sine_fits[1], coarse)
    payload = {
        "command": "pulsed",
        "source": args.tagfile,
        "coarse_frequency_hz": coarse,
        "bin_width_s": bin_width,
        "windows": [list(w) for w in windows],
        "window_fits": [f.as_dict() for f in sine_fits],
        "estimate": estimate.as_dict(),
        "histograms": hist_paths,
    }
    _json_dump(args.output, payload)
    print(f"t1 = {estimate.t1 * 1e6:.4f} us, t2 = {estimate.t2 * 1e6:.4f} us, "
          f"n = {estimate.n_cycles}, "
          f"f = {estimate.frequency / 1e6:.6f} MHz "
          f"+- {estimate.sigma_frequency:.1f} Hz")
    return 0


def cmd_report(args):
    rundir = args.rundir
    if not os.path.isdir(rundir):
        raise ConfigError(f"run directory {rundir!r} does not exist")
    outdir = args.output or os.path.join(rundir, "report")
    names = sorted(os.listdir(rundir))
    fit_files = []
    pulsed_files = []
    nsr_files = []
    spectrum_files = []
    hist_files = []
    for name in names:
        path = os.path.join(rundir, name)
        if not os.path.isfile(path):
            continue
        if name.endswith(".json"):
            try:
                with open(path, "r", encoding="utf-8") as fh:
                    payload = json.load(fh)
            except (OSError, json.JSONDecodeError):
                continue
            if payload.get("command") == "fit":
                fit_files.append((name, payload))
            elif payload.get("command") == "pulsed":
                pulsed_files.append((name, payload))
        elif name.endswith(".csv"):
            with open(path, "r", encoding="utf-8") as fh:
                first = fh.readline()
            if "nsr" in first:
                nsr_files.append(name)
            elif "spectrum" in first:
                spectrum_files.append(name)
            elif "pulsed-histogram" in first:
                hist_files.append(name)
    if not fit_files and not pulsed_files:
        raise ConfigError(
            "run directory holds no outputs to aggregate; missing: "
            "fit JSON (ionmotion fit) or pulsed JSON (ionmotion pulsed)")

    os.makedirs(outdir, exist_ok=True)
    rows = []
    for name, payload in fit_files:
        for entry in payload["fits"]:
            rows.append((entry["label"], entry["center_f0_hz"],
                         entry["sigma_f0_hz"], name))
    for name, payload in pulsed_files:
        est = payload["estimate"]
        rows.append(("pulsed", est["frequency_hz"],
                     est["sigma_frequency_hz"], name))
    _write_csv(
        os.path.join(outdir, "frequency_table.csv"),
        {"ionmotion": "frequency-table", "version": __version__,
         "source": rundir},
        ("mode", "frequency_hz", "sigma_hz", "source"),
        rows,
    )
    import shutil
    copied = {}
    for kind, files in (("fig2", spectrum_files), ("fig3", nsr_files),
                        ("fig4", hist_files)):
        for name in files:
            dest = f"{kind}_{name}"
            shutil.copyfile(os.path.join(rundir, name),
                            os.path.join(outdir, dest))
            copied.setdefault(kind, []).append(dest)
    _json_dump(os.path.join(outdir, "report.json"), {
        "command": "report",
        "source": rundir,
        "frequency_table": "frequency_table.csv",
        "frequencies": [
            {"mode": r[0], "frequency_hz": r[1], "sigma_hz": r[2],
             "source": r[3]} for r in rows
        ],
        "plots": copied,
    })
    print(f"wrote {outdir}: frequency table with {len(rows)} rows, "
          f"{sum(len(v) for v in copied.values())} plot files")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ionmotion",
        description="Simulate and analyse trapped-ion-chain motion from "
                    "time-tagged fluorescence photons.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a time-tag file")
    p.add_argument("-c", "--config", default=None, help="INI config path")
    p.add_argument("-o", "--output", required=True, help="output tag file")
    p.add_argument("--duration", default=None,
                   help="override simulation.duration (e.g. 60s)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--regime", choices=("thermal", "pulsed"),
                   default="thermal")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("spectrum", help="correlation histogram -> spectrum CSV")
    p.add_argument("tagfile")
    p.add_argument("--bin", default="16ns")
    p.add_argument("--max-lag", default="5ms")
    p.add_argument("--segments", type=int, default=1,
                   help="average this many equal-time segment spectra")
    p.add_argument("--window", choices=("rectangular", "hann"),
                   default="rectangular")
    p.add_argument("--power", action="store_true",
                   help="write |FFT|^2 instead of |FFT|")
    p.add_argument("--workers", type=int, default=0,
                   help="histogram worker threads (0 = all cores)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("fit", help="Lorentzian fits on a spectrum CSV")
    p.add_argument("spectrum")
    p.add_argument("--guess", action="append", required=True,
                   help="centre guess, optionally label=freq "
                        "(repeatable, e.g. x_common=1.665117MHz)")
    p.add_argument("--window", default="5kHz")
    p.add_argument("--weighting", choices=("auto", "none", "model"),
                   default="auto")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("nsr", help="noise-to-signal scan over max lags")
    p.add_argument("tagfile")
    p.add_argument("--lags", default="0.25ms,0.5ms,1ms,2ms,5ms,10ms")
    p.add_argument("--bin", default="16ns")
    p.add_argument("--workers", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_nsr)

    p = sub.add_parser("pulsed", help="phase-sensitive frequency estimate")
    p.add_argument("tagfile")
    p.add_argument("--windows", default="62us:12us,413us:12us",
                   help="two start:length windows after the trigger")
    p.add_argument("--coarse", default="1.6465MHz")
    p.add_argument("--bin", default="50ns")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_pulsed)

    p = sub.add_parser("report", help="aggregate a run directory")
    p.add_argument("rundir")
    p.add_argument("-o", "--output", default=None,
                   help="report directory (default rundir/report)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        return _fail(exc, 2)
    except OSError as exc:
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
