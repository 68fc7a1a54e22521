"""Kernel backend selection.

Hot numeric kernels ship in two variants: numba ``@njit`` loops and pure-numpy
fallbacks. The active path is chosen once at import from the ``V2S_BACKEND``
environment variable: ``numba`` (default) or ``numpy``. Both paths use the same
arithmetic so index-producing kernels (FPS, kNN, patch growth) agree bitwise.
"""

import os

_ENV_VAR = "V2S_BACKEND"


def _resolve() -> str:
    flag = os.environ.get(_ENV_VAR, "numba").strip().lower()
    if flag not in ("numba", "numpy"):
        raise RuntimeError(f"{_ENV_VAR} must be 'numba' or 'numpy', got {flag!r}")
    if flag == "numba":
        try:
            import numba  # noqa: F401
        except ImportError:
            return "numpy"
    return flag


BACKEND = _resolve()
USING_NUMBA = BACKEND == "numba"
