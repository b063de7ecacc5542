"""Process-level runtime knobs shared by the CLI and the test harness."""

from __future__ import annotations

import ctypes
import os

_M_MMAP_MAX = -4
_M_TRIM_THRESHOLD = -1

_tuned = False


def tune_allocator() -> bool:
    """Keep large numpy temporaries on the heap instead of fresh mmaps.

    glibc serves allocations above its mmap threshold with new mappings,
    so every multi-megabyte temporary pays page-fault cost on first touch;
    activation-sized arrays here sit exactly in that range. Safe no-op on
    non-glibc platforms. Returns True when the knobs were applied.
    """
    global _tuned
    if _tuned:
        return True
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(_M_MMAP_MAX, 0)
        libc.mallopt(_M_TRIM_THRESHOLD, -1)
        _tuned = True
    except OSError:
        return False
    return True


def thread_cap(n: int | None) -> None:
    """Best-effort cap on BLAS threads (must run before numpy spins pools)."""
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
