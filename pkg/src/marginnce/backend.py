"""Kernel backend selection.

The hot pairwise-pooling kernels ship in two flavours: numba @njit loops and a
pure-numpy fallback. Selection happens once at import time:

    MARGINNCE_BACKEND=numpy   force the numpy fallback
    MARGINNCE_BACKEND=numba   require the jit path (ImportError if unavailable)
    MARGINNCE_BACKEND=auto    numba when importable, numpy otherwise (default)

Every kernel dispatcher also takes use_numba= to override per call, which the
benchmark and the cross-backend tests rely on.
"""
from __future__ import annotations

import os

try:
    import numba  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    NUMBA_AVAILABLE = False

_requested = os.environ.get("MARGINNCE_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ImportError(
        f"MARGINNCE_BACKEND must be one of auto|numba|numpy, got {_requested!r}")
if _requested == "numba" and not NUMBA_AVAILABLE:
    raise ImportError("MARGINNCE_BACKEND=numba but numba is not importable")

USE_NUMBA = NUMBA_AVAILABLE and _requested != "numpy"


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
