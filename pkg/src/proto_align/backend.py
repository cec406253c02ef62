"""Kernel backend selection.

Hot numeric kernels (convolutions, assignment solver) ship in two variants:
numba-compiled loops and pure-numpy vectorized fallbacks. The active variant
is chosen once at import from the ``PROTO_ALIGN_BACKEND`` environment
variable (``numba`` or ``numpy``); the default is ``numba`` when importable,
else ``numpy``. Both variants agree up to floating-point summation order and
each is deterministic run-to-run.
"""

import os
import warnings

_VALID = ("numba", "numpy")


def _detect() -> str:
    requested = os.environ.get("PROTO_ALIGN_BACKEND", "").strip().lower()
    if requested and requested not in _VALID:
        raise ValueError(
            f"PROTO_ALIGN_BACKEND must be one of {_VALID}, got {requested!r}"
        )
    try:
        import numba  # noqa: F401
        have_numba = True
    except ImportError:
        have_numba = False
    if requested == "numba" and not have_numba:
        warnings.warn("PROTO_ALIGN_BACKEND=numba but numba is not importable; "
                      "falling back to numpy kernels")
        return "numpy"
    if not requested:
        return "numba" if have_numba else "numpy"
    return requested


_ACTIVE = _detect()


def active_backend() -> str:
    """Name of the kernel backend selected at import time."""
    return _ACTIVE


def thread_cap(default: int = 1) -> int:
    """Worker-parallelism cap from PROTO_ALIGN_THREADS (>= 1)."""
    raw = os.environ.get("PROTO_ALIGN_THREADS", "")
    if not raw.strip():
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"PROTO_ALIGN_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ValueError(f"PROTO_ALIGN_THREADS must be >= 1, got {n}")
    return n
