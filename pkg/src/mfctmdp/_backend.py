"""Kernel backend selection.

Hot loops are written twice: a numba ``@njit`` version and a plain numpy
version.  ``MFCTMDP_DISABLE_NUMBA=1`` (or numba failing to import) selects the
numpy path everywhere.  The flag is read once at import time.
"""
import os

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    _numba = None

USE_NUMBA = _numba is not None and os.environ.get("MFCTMDP_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def njit(func=None, **kwargs):
    """``numba.njit`` when the numba backend is active, identity otherwise."""

    def wrap(f):
        if USE_NUMBA:
            return _numba.njit(**kwargs)(f)
        return f

    if func is None:
        return wrap
    return wrap(func)


def is_compiled(func) -> bool:
    """True if ``func`` is a numba dispatcher that can be called from nopython code."""
    if _numba is None:
        return False
    from numba.core.registry import CPUDispatcher

    return isinstance(func, CPUDispatcher)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
