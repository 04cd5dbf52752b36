"""Numba switch.

Hot kernels are compiled with numba when it is importable and the
``PALKIT_DISABLE_NUMBA`` environment variable is unset (or ``0``).  Setting
it to ``1`` selects the pure-numpy path everywhere; this is read once at
import time.
"""

import os

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False


def _flag_set(name):
    return os.environ.get(name, "0").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = NUMBA_AVAILABLE and not _flag_set("PALKIT_DISABLE_NUMBA")


def njit(func):
    """Compile ``func`` in nopython mode, or return it untouched without numba."""
    if not NUMBA_AVAILABLE:
        return func
    return numba.njit(cache=True, fastmath=False)(func)
