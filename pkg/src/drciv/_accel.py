"""Backend switch for the compiled kernels.

Set ``DRCIV_DISABLE_NUMBA=1`` before import to force the pure-numpy path.
"""
from __future__ import annotations

import os

_FLAG = os.environ.get("DRCIV_DISABLE_NUMBA", "").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

USE_NUMBA = _numba is not None and _FLAG not in ("1", "true", "yes", "on")


def njit(func):
    """``numba.njit(cache=True)`` when numba is available, else a no-op."""
    if _numba is None:
        return func
    return _numba.njit(cache=True)(func)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
