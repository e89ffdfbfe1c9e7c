"""Allocator tuning for the training loop.

Training allocates many short-lived arrays of roughly a megabyte. glibc
serves those with fresh mmap calls by default, and the page faults on each
new mapping cost more than the arithmetic. Raising the mmap and trim
thresholds lets freed blocks be reused from the heap instead.
"""

from __future__ import annotations

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_done = False


def tune_allocator(threshold: int = 1 << 30) -> bool:
    """Best effort; returns False when not running on glibc."""
    global _done
    if _done:
        return True
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    mallopt.argtypes = [ctypes.c_int, ctypes.c_int]
    ok = mallopt(_M_MMAP_THRESHOLD, threshold) == 1 and mallopt(_M_TRIM_THRESHOLD, threshold) == 1
    _done = ok
    return ok
