"""Process-wide allocator tuning for allocation-heavy numerics.

Training rebuilds a large computation record every step, allocating and
freeing thousands of multi-megabyte arrays. With glibc defaults those
arrays are individually mmap'ed and returned to the kernel on free, so
every step pays first-touch page faults again; on kernels where faults
are expensive this dominates the runtime. Raising the mmap/trim
thresholds keeps the pages in the process heap and recycles them.

No-ops quietly on non-glibc platforms.
"""

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_ONE_GIB = 1 << 30

_done = False


def tune_allocator() -> bool:
    """Idempotent; returns True if thresholds were applied."""
    global _done
    if _done:
        return True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
        ok = bool(libc.mallopt(_M_MMAP_THRESHOLD, _ONE_GIB))
        ok = bool(libc.mallopt(_M_TRIM_THRESHOLD, _ONE_GIB)) and ok
        _done = ok
        return ok
    except (OSError, AttributeError, TypeError):
        return False
