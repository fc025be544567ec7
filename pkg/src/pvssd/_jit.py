"""Kernel compilation switch.

Kernels are plain Python functions over numpy arrays.  By default they are
compiled with ``numba.njit``; setting ``PVSSD_DISABLE_NUMBA=1`` (or running
without numba installed) leaves them as ordinary Python so the numpy
fallback path runs instead.
"""

import os

NUMBA_ENABLED = os.environ.get("PVSSD_DISABLE_NUMBA", "").lower() not in ("1", "true", "yes")

if NUMBA_ENABLED:
    try:
        import numba
    except ImportError:  # pragma: no cover
        NUMBA_ENABLED = False


def kernel(fn):
    if NUMBA_ENABLED:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


def pick(loop_impl, numpy_impl):
    """Select between a loop kernel (compiled) and a vectorized numpy twin."""
    return loop_impl if NUMBA_ENABLED else numpy_impl


def python_impl(fn):
    """Return the uncompiled Python function behind a kernel."""
    return getattr(fn, "py_func", fn)
