"""Numba switch.

Hot kernels exist twice: an ``@njit`` loop version and a vectorised numpy
version. ``PRIMPOLY_DISABLE_NUMBA=1`` (or numba missing) selects numpy.
"""
import os

_FLAG = os.environ.get("PRIMPOLY_DISABLE_NUMBA", "0").strip().lower()

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(fn):
    """Compile ``fn`` with numba when available, otherwise return it as-is."""
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def pick(fast, slow):
    return fast if USE_NUMBA else slow
