"""Optional numba acceleration.

Set ``SEMTOK_NUMBA=0`` in the environment to force the pure-numpy kernels.
"""
import os


def _noop_jit(*args, **kwargs):
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(f):
        return f

    return wrap


def _have_numba():
    try:
        import numba  # noqa: F401

        return True
    except ImportError:
        return False


HAVE_NUMBA = _have_numba()
USE_NUMBA = HAVE_NUMBA and os.environ.get("SEMTOK_NUMBA", "1").lower() not in ("0", "false", "no", "off")

if HAVE_NUMBA:
    from numba import njit
else:
    njit = _noop_jit
