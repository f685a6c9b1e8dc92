"""Optional numba acceleration.

Hot kernels are written once in a numba-compatible subset of Python and
compiled with ``njit`` when numba is importable. Setting the environment
variable ``QBILLIARD_NO_NUMBA=1`` forces the pure-numpy fallback paths,
which is what the benchmark compares against.
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


DISABLED = os.environ.get("QBILLIARD_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

# True when the compiled kernels are in use
USE_NUMBA = _have_numba() and not DISABLED

if USE_NUMBA:
    from numba import njit
else:
    njit = _noop_jit
