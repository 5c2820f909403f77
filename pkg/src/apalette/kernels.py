"""Hot inner loops, JIT-compiled with numba when available.

Set APALETTE_NUMBA=0 to force the pure-numpy fallback path (useful on
platforms without a working JIT, and for benchmarking). The backend is
chosen once at import time; both paths compute the same quantities and
`benchmarks/benchmark_backends.py` checks their agreement.
"""

from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("APALETTE_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "off", "no")

if _want_numba:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        _want_numba = False


def numba_enabled() -> bool:
    """True when the JIT backend is active."""
    return _want_numba


# -- squared-difference function for lag-based pitch tracking ---------------

def yin_difference_numpy(segments: np.ndarray, width: int, tau_max: int) -> np.ndarray:
    """d[i, tau] = sum_j (seg[i, j] - seg[i, j + tau])^2 for tau in [0, tau_max].

    ``segments`` has shape (n_frames, width + tau_max).
    """
    n = segments.shape[0]
    head = segments[:, :width]
    out = np.zeros((n, tau_max + 1), dtype=np.float64)
    for tau in range(1, tau_max + 1):
        diff = head - segments[:, tau:tau + width]
        out[:, tau] = np.einsum("ij,ij->i", diff, diff)
    return out


def _yin_difference_loop(segments, width, tau_max):
    n = segments.shape[0]
    out = np.zeros((n, tau_max + 1), dtype=np.float64)
    for i in range(n):
        for tau in range(1, tau_max + 1):
            acc = 0.0
            for j in range(width):
                d = segments[i, j] - segments[i, j + tau]
                acc += d * d
            out[i, tau] = acc
    return out


# -- sliding median with replicate padding ----------------------------------

def median_filter_numpy(x: np.ndarray, kernel: int) -> np.ndarray:
    """Odd-kernel sliding median; edges replicate the boundary value."""
    if kernel == 1:
        return x.copy()
    half = kernel // 2
    padded = np.concatenate(
        [np.full(half, x[0], dtype=x.dtype), x, np.full(half, x[-1], dtype=x.dtype)]
    )
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel)
    return np.median(windows, axis=1)


def _median_filter_loop(x, kernel):
    n = x.shape[0]
    out = np.empty(n, dtype=x.dtype)
    half = kernel // 2
    buf = np.empty(kernel, dtype=x.dtype)
    for i in range(n):
        for j in range(kernel):
            idx = i + j - half
            if idx < 0:
                idx = 0
            elif idx >= n:
                idx = n - 1
            buf[j] = x[idx]
        srt = np.sort(buf)
        out[i] = srt[half]
    return out


if _want_numba:
    yin_difference_numba = njit(cache=True)(_yin_difference_loop)
    median_filter_numba = njit(cache=True)(_median_filter_loop)

    def yin_difference(segments: np.ndarray, width: int, tau_max: int) -> np.ndarray:
        return yin_difference_numba(np.ascontiguousarray(segments, dtype=np.float64),
                                    width, tau_max)

    def median_filter_1d(x: np.ndarray, kernel: int) -> np.ndarray:
        if kernel == 1:
            return x.copy()
        return median_filter_numba(np.ascontiguousarray(x), kernel)
else:
    def yin_difference(segments: np.ndarray, width: int, tau_max: int) -> np.ndarray:
        return yin_difference_numpy(np.asarray(segments, dtype=np.float64), width, tau_max)

    def median_filter_1d(x: np.ndarray, kernel: int) -> np.ndarray:
        return median_filter_numpy(x, kernel)
