"""Kernel backend selection.

The hot inner loops (photon thinning, pair correlation, dead-time
censoring) exist in two functionally identical flavours: numba-compiled
scalar loops and vectorized pure-numpy code.  The active flavour is
chosen once at import time from the ``IONMOTION_BACKEND`` environment
variable:

    IONMOTION_BACKEND=numba   require numba, fail if unavailable
    IONMOTION_BACKEND=numpy   force the pure-numpy path
    unset / "auto"            numba if importable, else numpy

Everything outside the kernels (RNG draws, grid generation, file I/O)
is shared, so both backends consume the identical random stream and
produce the same photon records.
"""

import os

_requested = os.environ.get("IONMOTION_BACKEND", "auto").strip().lower() or "auto"

if _requested not in ("auto", "numba", "numpy"):
    raise RuntimeError(
        "IONMOTION_BACKEND must be 'numba', 'numpy' or 'auto', got %r" % _requested
    )

if _requested == "numpy":
    _numba = None
else:
    try:
        import numba as _numba
    except ImportError:
        _numba = None
        if _requested == "numba":
            raise RuntimeError(
                "IONMOTION_BACKEND=numba but numba is not importable"
            ) from None

USING_NUMBA = _numba is not None
BACKEND = "numba" if USING_NUMBA else "numpy"


def njit(**kwargs):
    """numba.njit when the numba backend is active, identity otherwise."""
    if USING_NUMBA:
        return _numba.njit(**kwargs)

    def passthrough(func):
        return func

    return passthrough
