"""Numba switch for the hot kernels.

Set ``METACFG_DISABLE_NUMBA=1`` to force the pure-numpy code paths (useful for
debugging and for checking that both paths agree).
"""

import os

_FLAG = "METACFG_DISABLE_NUMBA"


def _numba_requested() -> bool:
    return os.environ.get(_FLAG, "").strip().lower() not in {"1", "true", "yes", "on"}


try:
    if not _numba_requested():
        raise ImportError("numba disabled by " + _FLAG)
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:
    _njit = None
    HAVE_NUMBA = False

numba_default = {
    "nogil": True,
    "cache": True,
    "fastmath": False,
    "boundscheck": False,
    "error_model": "numpy",
}


def njit(fn):
    """Compile ``fn`` with numba when available, else return it untouched."""
    if _njit is None:
        return fn
    return _njit(**numba_default)(fn)


def use_numba() -> bool:
    return HAVE_NUMBA
