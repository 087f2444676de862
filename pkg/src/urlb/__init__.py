"""Desk-scale unsupervised RL benchmark toolkit."""
import ctypes
import sys

__version__ = "0.1.0"


def _pool_large_allocations():
    # glibc unmaps freed blocks above 128 KiB, so every batch-sized temporary
    # page-faults afresh; raising the thresholds keeps them in the heap.
    if not sys.platform.startswith("linux"):
        return
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
        libc.mallopt(-2, 64 << 20)  # M_TOP_PAD
    except (OSError, AttributeError):
        pass


_pool_large_allocations()
