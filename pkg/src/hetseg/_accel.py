"""Optional numba acceleration.

Set ``HETSEG_DISABLE_NUMBA=1`` to force the pure-numpy kernels even when
numba is importable. The flag is read once, at import time.
"""
import os

_FALSY = {"", "0", "false", "no", "off"}

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional extra
    numba = None
    HAVE_NUMBA = False

DISABLED_BY_ENV = os.environ.get("HETSEG_DISABLE_NUMBA", "").strip().lower() not in _FALSY
USE_NUMBA = HAVE_NUMBA and not DISABLED_BY_ENV


def njit(func=None, **kwargs):
    """``numba.njit(cache=True)`` if numba is installed, identity otherwise.

    The loop implementations stay importable either way so the two backends
    can be compared side by side.
    """
    kwargs.setdefault("cache", True)

    def wrap(f):
        if not HAVE_NUMBA:
            return f
        return numba.njit(**kwargs)(f)

    return wrap(func) if func is not None else wrap


def backend():
    return "numba" if USE_NUMBA else "numpy"
