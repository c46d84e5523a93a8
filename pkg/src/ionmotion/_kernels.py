"""Hot inner loops, in two interchangeable flavours.

Each kernel has a numba-compilable scalar-loop source and a vectorized
pure-numpy twin.  Both consume, element for element, the same
pre-drawn random inputs and perform the same arithmetic, so their
outputs agree bit for bit (integer kernels exactly; the thinning
kernel up to sub-ULP libm differences that have never been observed to
flip an accept decision).

The module-level names ``accept_photons``, ``pair_histogram`` and
``dead_time_keep`` point at the active backend chosen in
:mod:`ionmotion._backend`.  ``get_kernels`` exposes both flavours for
parity tests and benchmarks.
"""

import numpy as np

from ._backend import USING_NUMBA

# ---------------------------------------------------------------------------
# photon thinning: evaluate fringe rate on candidate times, accept/reject


def _accept_photons_loop(tc, grid_t0, inv_grid_dt, cgrid, sgrid, omega, ueff,
                         kwave, phase0, nu, r0, rmax, uacc):
    ncand = tc.shape[0]
    nmodes = omega.shape[0]
    acc = np.zeros(ncand, dtype=np.bool_)
    for i in range(ncand):
        t = tc[i]
        x = (t - grid_t0) * inv_grid_dt
        k = int(x)
        w = x - k
        path = 0.0
        for m in range(nmodes):
            c = cgrid[m, k] + (cgrid[m, k + 1] - cgrid[m, k]) * w
            s = sgrid[m, k] + (sgrid[m, k + 1] - sgrid[m, k]) * w
            ph = omega[m] * t
            path += ueff[m] * (c * np.cos(ph) + s * np.sin(ph))
        rate = r0 * (1.0 + nu * np.sin(phase0 + kwave * path))
        if uacc[i] * rmax < rate:
            acc[i] = True
    return acc


def accept_photons_numpy(tc, grid_t0, inv_grid_dt, cgrid, sgrid, omega, ueff,
                         kwave, phase0, nu, r0, rmax, uacc):
    x = (tc - grid_t0) * inv_grid_dt
    k = x.astype(np.int64)
    w = x - k
    path = np.zeros_like(tc)
    for m in range(omega.shape[0]):
        c = cgrid[m, k] + (cgrid[m, k + 1] - cgrid[m, k]) * w
        s = sgrid[m, k] + (sgrid[m, k + 1] - sgrid[m, k]) * w
        ph = omega[m] * tc
        path += ueff[m] * (c * np.cos(ph) + s * np.sin(ph))
    rate = r0 * (1.0 + nu * np.sin(phase0 + kwave * path))
    return uacc * rmax < rate


# ---------------------------------------------------------------------------
# pair correlation histogram
#
# counts[k] = number of ordered pairs (i < j) with lag in
# (k*bin_ps, (k+1)*bin_ps]; zero lags are skipped.  The bin index for an
# integer lag is floor((lag-1)/bin_ps), computed with one float multiply
# plus an exact integer fix-up (integer division is far slower and the
# float guess is off by at most one).


def _pair_histogram_loop(ts, lo, hi, nbins, bin_ps):
    counts = np.zeros(nbins, dtype=np.int64)
    lag_cut = nbins * bin_ps
    inv_bin = 1.0 / bin_ps
    n = ts.shape[0]
    for i in range(lo, hi):
        ti = ts[i]
        for j in range(i + 1, n):
            lag = ts[j] - ti
            if lag > lag_cut:
                break
            if lag <= 0:
                continue
            k = int((lag - 1) * inv_bin)
            if (k + 1) * bin_ps <= lag - 1:
                k += 1
            elif k * bin_ps > lag - 1:
                k -= 1
            counts[k] += 1
    return counts


def pair_histogram_numpy(ts, lo, hi, nbins, bin_ps, chunk=1 << 22):
    counts = np.zeros(nbins, dtype=np.int64)
    lag_cut = nbins * bin_ps
    inv_bin = 1.0 / bin_ps
    n = ts.shape[0]
    for a in range(lo, hi, chunk):
        b = min(a + chunk, hi)
        d = 1
        while True:
            jb = min(b, n - d)
            if jb <= a:
                break
            lag = ts[a + d:jb + d] - ts[a:jb]
            lag = lag[(lag <= lag_cut) & (lag > 0)]
            if lag.size == 0:
                # lags grow with offset: if every pair at this offset is
                # beyond the cut, larger offsets are too (zero-lag ties on
                # other channels cannot hide behind a > lag_cut pair)
                if not np.any(ts[a + d:jb + d] - ts[a:jb] <= lag_cut):
                    break
                d += 1
                continue
            k = ((lag - 1) * inv_bin).astype(np.int64)
            k += ((k + 1) * bin_ps <= lag - 1).astype(np.int64)
            k -= (k * bin_ps > lag - 1).astype(np.int64)
            counts += np.bincount(k, minlength=nbins)
            d += 1
    return counts


# ---------------------------------------------------------------------------
# per-detector dead-time censoring (sequential: each kept event opens a
# fresh dead window)


def _dead_time_keep_loop(ts, dead_ps):
    n = ts.shape[0]
    keep = np.ones(n, dtype=np.bool_)
    if n == 0 or dead_ps <= 0:
        return keep
    last = ts[0]
    for i in range(1, n):
        if ts[i] - last < dead_ps:
            keep[i] = False
        else:
            last = ts[i]
    return keep


def dead_time_keep_numpy(ts, dead_ps):
    n = ts.shape[0]
    keep = np.ones(n, dtype=np.bool_)
    if n == 0 or dead_ps <= 0:
        return keep
    coll = np.flatnonzero(np.diff(ts) < dead_ps)
    if coll.size == 0:
        return keep
    # isolated collision clusters; events between clusters are untouched
    splits = np.flatnonzero(np.diff(coll) > 1) + 1
    for grp in np.split(coll, splits):
        last = ts[grp[0]]
        for j in range(grp[0] + 1, grp[-1] + 2):
            if ts[j] - last < dead_ps:
                keep[j] = False
            else:
                last = ts[j]
    return keep


# ---------------------------------------------------------------------------
# backend dispatch

_numba_cache = {}


def _compiled(name, source):
    if name not in _numba_cache:
        import numba

        _numba_cache[name] = numba.njit(cache=True, nogil=True)(source)
    return _numba_cache[name]


def get_kernels(backend):
    """Return dict of the three kernels for 'numba' or 'numpy'."""
    if backend == "numpy":
        return {
            "accept_photons": accept_photons_numpy,
            "pair_histogram": pair_histogram_numpy,
            "dead_time_keep": dead_time_keep_numpy,
        }
    if backend == "numba":
        return {
            "accept_photons": _compiled("accept", _accept_photons_loop),
            "pair_histogram": _compiled("pairs", _pair_histogram_loop),
            "dead_time_keep": _compiled("dead", _dead_time_keep_loop),
        }
    raise ValueError("backend must be 'numba' or 'numpy', got %r" % backend)


if USING_NUMBA:
    _active = get_kernels("numba")
else:
    _active = get_kernels("numpy")

accept_photons = _active["accept_photons"]
pair_histogram = _active["pair_histogram"]
dead_time_keep = _active["dead_time_keep"]
