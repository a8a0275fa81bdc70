"""JIT switch for the hot kernels.

Set ``OITSPLAT_DISABLE_JIT=1`` to route every kernel through its pure-numpy
implementation. ``OITSPLAT_PARALLEL=1`` compiles the numba kernels with
``parallel=True``; the default is serial because the kernels are already
deterministic per output slot and most runs here are single-core.
"""

from __future__ import annotations

import os

_TRUTHY = {"1", "true", "yes", "on"}

DISABLE_JIT = os.environ.get("OITSPLAT_DISABLE_JIT", "").lower() in _TRUTHY
PARALLEL = os.environ.get("OITSPLAT_PARALLEL", "").lower() in _TRUTHY

try:
    import numba
    from numba import prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False
    prange = range


def njit(fn):
    """Compile ``fn`` with numba when available; otherwise return it as is."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, fastmath=False, parallel=PARALLEL)(fn)


def default_backend() -> str:
    if DISABLE_JIT or not HAVE_NUMBA:
        return "numpy"
    return "numba"
