"""Backend selection: numba-jitted kernels with a pure-numpy fallback.

The environment variable MFRBSDE_PURE_NUMPY (set to 1/true/yes) forces the
vectorised numpy implementations even when numba is importable.  The same
flag is also honoured when numba is simply missing, so the package degrades
gracefully on machines without a working compiler toolchain.
"""

from __future__ import annotations

import os


def _want_pure_numpy() -> bool:
    return os.environ.get("MFRBSDE_PURE_NUMPY", "").strip().lower() in ("1", "true", "yes")


USE_NUMBA = False
if not _want_pure_numpy():
    try:
        from numba import njit  # noqa: F401

        USE_NUMBA = True
    except ImportError:  # pragma: no cover - exercised only without numba
        USE_NUMBA = False

if not USE_NUMBA:
    def njit(*args, **kwargs):  # type: ignore[no-redef]
        """Decorator stub so kernel sources import cleanly without numba."""

        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(func):
            return func

        return wrap


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
