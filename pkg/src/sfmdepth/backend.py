"""Kernel backend selection.

Hot inner loops (ray marching, bilinear sampling, conv patch extraction)
have two implementations: numba-jitted kernels and pure-numpy fallbacks.
Setting the environment variable ``SFMDEPTH_DISABLE_NUMBA=1`` before import
forces the numpy path; otherwise numba is used when importable.
"""

import os

ENV_FLAG = "SFMDEPTH_DISABLE_NUMBA"


def _numba_requested() -> bool:
    return os.environ.get(ENV_FLAG, "0").strip().lower() not in ("1", "true", "yes")


if _numba_requested():
    # the sandboxed TBB probe is noisy; omp/workqueue behave identically here
    os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")
    try:
        import numba  # noqa: F401

        NUMBA_ENABLED = True
    except ImportError:
        NUMBA_ENABLED = False
else:
    NUMBA_ENABLED = False


def active_backend() -> str:
    """Name of the kernel backend selected at import time."""
    return "numba" if NUMBA_ENABLED else "numpy"
