"""Numba dispatch for the hot kernels.

Every kernel decorated with :func:`maybe_njit` has a pure-numpy twin body:
the decorator compiles it with numba unless the environment variable
``CLUSTILE_NUMBA`` is set to ``0``/``false``/``no`` (or numba is missing),
in which case the plain Python/numpy function runs unchanged.  Both paths
compute identical values; ``benchmarks/bench_accel.py`` times them side by
side.
"""

import os

_flag = os.environ.get("CLUSTILE_NUMBA", "1").strip().lower()
NUMBA_REQUESTED = _flag not in ("0", "false", "no", "off")

if NUMBA_REQUESTED:
    try:
        from numba import njit as _njit

        USING_NUMBA = True
    except ImportError:
        USING_NUMBA = False
else:
    USING_NUMBA = False


def maybe_njit(*args, **kwargs):
    """``numba.njit`` when acceleration is on, identity decorator otherwise."""
    if not USING_NUMBA:
        if args and callable(args[0]):
            return args[0]

        def passthrough(func):
            return func

        return passthrough
    if args and callable(args[0]):
        return _njit(cache=True)(args[0])
    kwargs.setdefault("cache", True)
    return _njit(*args, **kwargs)
