"""Worker-count control for internal parallelism.

MH3D_THREADS caps the number of workers used by FFT calls and any internal
pools; unset, all available CPUs are used.
"""

from __future__ import annotations

import os

__all__ = ["fft_workers"]


def fft_workers() -> int:
    raw = os.environ.get("MH3D_THREADS", "")
    try:
        n = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        n = os.cpu_count() or 1
    return max(1, n)
