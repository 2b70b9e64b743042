"""Optional numba acceleration.

Hot kernels are written in the numba-compatible subset of numpy and wrapped
with :func:`maybe_njit`.  Setting ``HEVLAB_NUMBA=0`` (or ``off``/``false``)
before import disables compilation, so the same kernels run as plain numpy
code.  Kernels whose pure-python form would be loop-bound ship a separate
vectorized twin and pick one via :data:`USE_NUMBA`.
"""
import os

_flag = os.environ.get("HEVLAB_NUMBA", "1").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and _flag not in ("0", "off", "false", "no")


def maybe_njit(*args, **kwargs):
    """``numba.njit`` when acceleration is on, identity otherwise."""
    if args and callable(args[0]) and len(args) == 1 and not kwargs:
        fn = args[0]
        return numba.njit(cache=True)(fn) if USE_NUMBA else fn

    def wrap(fn):
        if not USE_NUMBA:
            return fn
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)(fn)

    return wrap
