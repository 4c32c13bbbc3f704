"""Numba switch shared by every hot kernel.

Set ``QMCF_DISABLE_NUMBA=1`` to route all kernels through their vectorised
numpy implementations. ``QMCF_THREADS`` caps numba's thread pool.
"""
import os

_disabled = os.environ.get("QMCF_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and not _disabled

if USE_NUMBA and os.environ.get("QMCF_THREADS"):
    try:
        numba.set_num_threads(max(1, int(os.environ["QMCF_THREADS"])))
    except (ValueError, RuntimeError):  # pragma: no cover
        pass


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    kwargs.setdefault("cache", True)
    if numba is None:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def select(fast, fallback, use_numba=None):
    """Pick the compiled kernel or the numpy fallback."""
    flag = USE_NUMBA if use_numba is None else use_numba
    return fast if flag else fallback
