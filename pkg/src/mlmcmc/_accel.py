"""Optional numba acceleration.

Set ``MLMCMC_DISABLE_NUMBA=1`` to run every kernel as plain Python on numpy
arrays. Kernels use only arithmetic on pre-drawn random numbers, so both
paths return bitwise-identical results.
"""
import os

_DISABLED = os.environ.get("MLMCMC_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _njit

    NUMBA_ENABLED = True
except ImportError:
    _njit = None
    NUMBA_ENABLED = False


def jit(func):
    """Compile ``func`` with numba when enabled, otherwise return it as is."""
    if NUMBA_ENABLED:
        return _njit(nogil=True, cache=False)(func)
    return func


def python_impl(func):
    """Return the pure-Python body of a (possibly jitted) kernel."""
    return getattr(func, "py_func", func)
