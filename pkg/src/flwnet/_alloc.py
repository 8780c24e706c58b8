"""Process-level allocator tuning for repeated large inference buffers.

Each full-resolution activation is tens of megabytes. By default glibc
serves such blocks with ``mmap`` and returns them on free, so every
forward pass pays page faults and page zeroing for fresh memory. Raising
the mmap threshold keeps them on the heap, and raising the trim threshold
stops the heap top from being handed back after every call. This is a no-op off
glibc.
"""

from __future__ import annotations

import ctypes
import ctypes.util

__all__ = ["keep_large_blocks"]

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_MMAP_THRESHOLD_MAX = 32 << 20  # glibc's ceiling on 64-bit
_TRIM_THRESHOLD = 512 << 20


def keep_large_blocks() -> bool:
    """Serve blocks up to 32 MiB from a heap that is not trimmed; returns whether both settings took."""
    name = ctypes.util.find_library("c")
    if name is None:
        return False
    try:
        libc = ctypes.CDLL(name)
        mmap_ok = libc.mallopt(_M_MMAP_THRESHOLD, _MMAP_THRESHOLD_MAX)
        trim_ok = libc.mallopt(_M_TRIM_THRESHOLD, _TRIM_THRESHOLD)
        return bool(mmap_ok and trim_ok)
    except (OSError, AttributeError):
        return False
