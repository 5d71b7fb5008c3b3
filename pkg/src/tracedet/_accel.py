"""Numba toggle.

Hot kernels are written once as plain numpy-compatible loops and compiled with
``numba.njit`` unless ``TRACEDET_DISABLE_NUMBA=1`` is set (or numba is not
importable), in which case the same Python source runs uncompiled and callers
are routed to vectorized numpy fallbacks.
"""

import os

_DISABLED = os.environ.get("TRACEDET_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag
    _njit = None
    HAS_NUMBA = False


def maybe_njit(**kwargs):
    """Compile with ``numba.njit(**kwargs)`` when acceleration is enabled."""

    def wrap(fn):
        if HAS_NUMBA:
            return _njit(**kwargs)(fn)
        return fn

    return wrap
