"""Numba shim.

Hot loops are written once as ``@njit`` kernels with a numpy/scipy twin.
Setting ``PORTQP_DISABLE_NUMBA=1`` (or running without numba installed)
routes every dispatcher to the numpy twin.
"""
import os

_FLAG = os.environ.get("PORTQP_DISABLE_NUMBA", "").strip().lower()

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` with on-disk caching; identity decorator without numba."""
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def backend():
    return "numba" if USE_NUMBA else "numpy"
