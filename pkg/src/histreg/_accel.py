"""Numba switch.

Hot kernels in :mod:`histreg.kernels` exist twice: an ``@njit`` loop version
and a vectorised numpy version.  Which one is exported is decided once, at
import time:

* ``HISTREG_NO_NUMBA=1`` in the environment forces the numpy path;
* a missing or broken numba install falls back to numpy silently.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("HISTREG_NO_NUMBA", "").strip().lower()
DISABLED_BY_ENV = _FLAG in {"1", "true", "yes", "on"}

try:
    import numba as _numba
except Exception:  # pragma: no cover - depends on the install
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and not DISABLED_BY_ENV


def njit(fn):
    """``numba.njit`` with the project-wide options, or ``fn`` unchanged.

    ``parallel`` stays off: per-pixel reductions must sum in a fixed order so
    that fields written to disk are bit-identical between runs.
    """
    if not HAVE_NUMBA:
        return fn
    return _numba.njit(cache=True, nogil=True, fastmath=False, error_model="numpy")(fn)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
