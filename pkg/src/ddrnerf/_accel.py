"""Numba switch.

Set ``DDRNERF_DISABLE_NUMBA=1`` to route every hot kernel through the
vectorised numpy implementations instead of the jitted loops.  The flag is
read once at import time.
"""

import os

_FLAG = "DDRNERF_DISABLE_NUMBA"


def _env_disabled():
    return os.environ.get(_FLAG, "").strip().lower() in ("1", "true", "yes", "on")


try:
    import numba as _nb
except ImportError:  # pragma: no cover
    _nb = None

NUMBA_AVAILABLE = _nb is not None
USE_NUMBA = NUMBA_AVAILABLE and not _env_disabled()

if NUMBA_AVAILABLE:
    njit = _nb.njit(cache=True, fastmath=False, nogil=True)
else:  # pragma: no cover
    def njit(fn):
        return fn


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
