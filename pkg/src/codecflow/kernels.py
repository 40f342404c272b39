"""Loop-heavy inner kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``CODECFLOW_USE_NUMBA`` is not
set to ``0``.  Both paths are always importable as ``numpy_impl`` and
``numba_impl`` (the latter is ``None`` without numba) so they can be
cross-checked and benchmarked against each other.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _env_enabled() -> bool:
    return os.environ.get("CODECFLOW_USE_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and _env_enabled()


# ---------------------------------------------------------------- numpy path


def _overlap_add_np(cols: np.ndarray, hop: int, out_len: int) -> np.ndarray:
    rows, n_frames, width = cols.shape
    out = np.zeros((rows, out_len), dtype=cols.dtype)
    span = hop * (n_frames - 1) + 1
    for k in range(width):
        out[:, k : k + span : hop] += cols[:, :, k]
    return out


def _normalized_acf_np(frames: np.ndarray, max_lag: int, window_acf: np.ndarray) -> np.ndarray:
    n_frames, n = frames.shape
    if n_frames == 0:
        return np.zeros((0, max_lag + 1))
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(frames, nfft, axis=1)
    acf = np.fft.irfft(spec.real**2 + spec.imag**2, nfft, axis=1)[:, : max_lag + 1]
    r0 = acf[:, :1]
    out = acf / np.where(r0 > 0, r0, 1.0) / window_acf[: max_lag + 1]
    out[r0[:, 0] <= 0] = 0.0
    return out


def _majority_smooth_np(labels: np.ndarray, width: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if n == 0:
        return labels.copy()
    n_labels = int(labels.max()) + 1
    half = width // 2
    onehot = np.zeros((n + 2 * half, n_labels), dtype=np.int64)
    onehot[np.arange(n) + half, labels] = 1
    csum = np.concatenate([np.zeros((1, n_labels), dtype=np.int64), np.cumsum(onehot, axis=0)])
    counts = csum[width:] - csum[:-width]
    best = counts.max(axis=1)
    n_best = (counts == best[:, None]).sum(axis=1)
    winner = counts.argmax(axis=1)
    return np.where(n_best == 1, winner, labels)


def _top2_np(dist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows = np.arange(dist.shape[0])
    first = dist.argmin(axis=1)
    masked = dist.copy()
    masked[rows, first] = np.inf
    second = masked.argmin(axis=1)
    return first, second


numpy_impl = SimpleNamespace(
    overlap_add=_overlap_add_np,
    normalized_acf=_normalized_acf_np,
    majority_smooth=_majority_smooth_np,
    top2=_top2_np,
)


# ---------------------------------------------------------------- numba path

numba_impl = None

if HAVE_NUMBA:

    @njit(cache=True)
    def _overlap_add_nb_core(cols, hop, out):
        rows, n_frames, width = cols.shape
        for r in range(rows):
            for f in range(n_frames):
                base = f * hop
                for k in range(width):
                    out[r, base + k] += cols[r, f, k]

    def _overlap_add_nb(cols: np.ndarray, hop: int, out_len: int) -> np.ndarray:
        cols = np.ascontiguousarray(cols)
        out = np.zeros((cols.shape[0], out_len), dtype=cols.dtype)
        _overlap_add_nb_core(cols, hop, out)
        return out

    @njit(cache=True)
    def _normalized_acf_nb_core(frames, max_lag, window_acf, out):
        n_frames, n = frames.shape
        for f in range(n_frames):
            r0 = 0.0
            for i in range(n):
                r0 += frames[f, i] * frames[f, i]
            if r0 <= 0.0:
                continue
            for lag in range(max_lag + 1):
                acc = 0.0
                for i in range(n - lag):
                    acc += frames[f, i] * frames[f, i + lag]
                out[f, lag] = acc / r0 / window_acf[lag]

    def _normalized_acf_nb(frames: np.ndarray, max_lag: int, window_acf: np.ndarray) -> np.ndarray:
        frames = np.ascontiguousarray(frames, dtype=np.float64)
        out = np.zeros((frames.shape[0], max_lag + 1), dtype=np.float64)
        _normalized_acf_nb_core(frames, max_lag, np.ascontiguousarray(window_acf, dtype=np.float64), out)
        return out

    @njit(cache=True)
    def _majority_smooth_nb_core(labels, width, n_labels, out):
        n = labels.size
        half = width // 2
        counts = np.zeros(n_labels, dtype=np.int64)
        for i in range(n):
            counts[:] = 0
            lo = max(0, i - half)
            hi = min(n, i + half + 1)
            for j in range(lo, hi):
                counts[labels[j]] += 1
            best = -1
            winner = -1
            n_best = 0
            for lab in range(n_labels):
                if counts[lab] > best:
                    best = counts[lab]
                    winner = lab
                    n_best = 1
                elif counts[lab] == best:
                    n_best += 1
            out[i] = winner if n_best == 1 else labels[i]

    def _majority_smooth_nb(labels: np.ndarray, width: int) -> np.ndarray:
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        out = np.empty_like(labels)
        if labels.size:
            _majority_smooth_nb_core(labels, width, int(labels.max()) + 1, out)
        return out

    @njit(cache=True)
    def _top2_nb_core(dist, first, second):
        rows, k = dist.shape
        for r in range(rows):
            b1 = np.inf
            b2 = np.inf
            i1 = 0
            i2 = 0
            for j in range(k):
                d = dist[r, j]
                if d < b1:
                    b2 = b1
                    i2 = i1
                    b1 = d
                    i1 = j
                elif d < b2:
                    b2 = d
                    i2 = j
            if k > 1 and i2 == i1:
                i2 = 1 if i1 == 0 else 0
            first[r] = i1
            second[r] = i2

    def _top2_nb(dist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dist = np.ascontiguousarray(dist)
        first = np.empty(dist.shape[0], dtype=np.int64)
        second = np.empty(dist.shape[0], dtype=np.int64)
        _top2_nb_core(dist, first, second)
        return first, second

    numba_impl = SimpleNamespace(
        overlap_add=_overlap_add_nb,
        normalized_acf=_normalized_acf_nb,
        majority_smooth=_majority_smooth_nb,
        top2=_top2_nb,
    )


_active = numba_impl if USE_NUMBA else numpy_impl


def backend() -> str:
    """Name of the kernel set in use: ``"numba"`` or ``"numpy"``."""
    return "numba" if _active is numba_impl else "numpy"


def overlap_add(cols: np.ndarray, hop: int, out_len: int) -> np.ndarray:
    """Sum ``cols[r, f, k]`` into ``out[r, f * hop + k]``."""
    return _active.overlap_add(cols, hop, out_len)


def normalized_acf(frames: np.ndarray, max_lag: int, window_acf: np.ndarray) -> np.ndarray:
    """Window-corrected normalized autocorrelation for lags ``0..max_lag``.

    ``frames`` must already be mean-removed and windowed.  Each lag value is
    divided by lag-0 energy and by ``window_acf`` (the window's own
    normalized autocorrelation).  All-zero frames give all-zero rows.
    """
    return _active.normalized_acf(frames, max_lag, window_acf)


def majority_smooth(labels: np.ndarray, width: int = 5) -> np.ndarray:
    """Centered majority vote; edge windows truncate, ties keep the center."""
    return _active.majority_smooth(labels, width)


def top2(dist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise indices of the smallest and second-smallest entries."""
    return _active.top2(dist)
