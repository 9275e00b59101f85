"""Process-level performance knobs."""

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3
_done = False


def keep_large_allocations_on_heap() -> bool:
    """Stop glibc from mmap-ing (and page-faulting) every multi-MB temporary.

    Training allocates the same few activation-sized arrays every step; serving
    them from the heap roughly halves elementwise-op cost. No-op off glibc.
    """
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = (libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30) == 1
              and libc.mallopt(_M_TRIM_THRESHOLD, 2**31 - 1) == 1
              and libc.mallopt(_M_TOP_PAD, 1 << 27) == 1)
    except (OSError, AttributeError):
        return False
    _done = ok
    return ok
