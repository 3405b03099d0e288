"""First-order linear recurrence scans.

A lane is a pair of equal-length sequences ``(a, b)`` describing the recurrence
``h[t] = a[t] * h[t-1] + b[t]`` with ``h[-1] = 0``. Lanes run along the last axis
of the input arrays; all leading axes are independent lanes.

The parallel variant is a Blelloch up-sweep/down-sweep over a fixed combination
tree, so its result depends only on the lane length, never on how lanes are
split across worker threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

_num_threads = 1


def set_num_threads(n: int) -> None:
    """Set how many worker threads ``parallel_scan`` may split lanes across."""
    global _num_threads
    if n < 1:
        raise ValueError(f"thread count must be positive, got {n}")
    _num_threads = int(n)


def get_num_threads() -> int:
    return _num_threads


@dataclass(frozen=True)
class ScanLanePair:
    """Coefficient/value sequences for one or more scan lanes (last axis is time)."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a)
        b = np.asarray(self.b)
        if a.shape != b.shape:
            raise ValueError(f"lane shapes differ: a{a.shape} vs b{b.shape}")
        if a.ndim == 0 or a.shape[-1] < 1:
            raise ValueError("lane length must be at least 1")
        # integer inputs would truncate the recurrence; promote to a shared real type
        dtype = np.result_type(a, b)
        if dtype != object and not np.issubdtype(dtype, np.inexact):
            dtype = np.float64
        a, b = a.astype(dtype, copy=False), b.astype(dtype, copy=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def length(self) -> int:
        return self.a.shape[-1]


def combine(p1, p2):
    """Associative combine ``(a1, b1) . (a2, b2) = (a1*a2, a2*b1 + b2)``.

    ``p1`` is the earlier segment. Identity element is ``(1, 0)``.
    """
    a1, b1 = p1
    a2, b2 = p2
    return a1 * a2, a2 * b1 + b2


def _as_lane(a, b) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(a, ScanLanePair):
        return a.a, a.b
    lane = ScanLanePair(a, b)
    return lane.a, lane.b


def serial_scan(a, b=None) -> np.ndarray:
    """Reference left-to-right evaluation of ``h[t] = a[t] h[t-1] + b[t]``."""
    a, b = _as_lane(a, b)
    h = np.empty_like(b)
    prev = b[..., 0] * 0
    for t in range(b.shape[-1]):
        prev = a[..., t] * prev + b[..., t]
        h[..., t] = prev
    return h


def serial_reverse_scan(a, b=None) -> np.ndarray:
    """Reference right-to-left evaluation of ``g[t] = a[t] g[t+1] + b[t]``, ``g[L] = 0``."""
    a, b = _as_lane(a, b)
    g = np.empty_like(b)
    nxt = b[..., 0] * 0
    for t in range(b.shape[-1] - 1, -1, -1):
        nxt = a[..., t] * nxt + b[..., t]
        g[..., t] = nxt
    return g


def _next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


def _blelloch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # a, b: (lanes, L); work time-major so each tree level touches whole rows
    lanes, length = b.shape
    n = _next_pow2(length)
    one = np.ones((), dtype=a.dtype) if a.dtype != object else 1
    A = np.empty((n, lanes), dtype=a.dtype)
    B = np.empty((n, lanes), dtype=b.dtype)
    A[:length] = a.T
    B[:length] = b.T
    A[length:] = one
    B[length:] = 0

    # up-sweep: each right child becomes the total of its subtree
    d = 1
    while d < n:
        left = slice(d - 1, n, 2 * d)
        right = slice(2 * d - 1, n, 2 * d)
        B[right] = A[right] * B[left] + B[right]
        A[right] = A[left] * A[right]
        d *= 2

    # down-sweep: convert subtree totals into exclusive prefixes
    A[n - 1] = one
    B[n - 1] = 0
    d = n // 2
    while d >= 1:
        left = slice(d - 1, n, 2 * d)
        right = slice(2 * d - 1, n, 2 * d)
        tA, tB = A[left], B[left]
        pA, pB = A[right], B[right]
        # right child prefix = parent prefix . left subtree total
        newA, newB = pA * tA, tA * pB + tB
        A[left], B[left] = pA, pB
        A[right], B[right] = newA, newB
        d //= 2

    # inclusive result: exclusive prefix . own element
    return a * B[:length].T + b


def parallel_scan(a, b=None, *, threads: int | None = None) -> np.ndarray:
    """Tree-structured scan of ``h[t] = a[t] h[t-1] + b[t]`` along the last axis.

    Non-power-of-two lengths are padded internally with the identity ``(1, 0)``.
    Works on float arrays and on object arrays of exact numbers (e.g. Fraction).
    """
    a, b = _as_lane(a, b)
    shape = b.shape
    a2 = a.reshape(-1, shape[-1])
    b2 = b.reshape(-1, shape[-1])
    workers = threads or _num_threads
    lanes = a2.shape[0]
    if workers <= 1 or lanes < 2:
        out = _blelloch(a2, b2)
    else:
        bounds = np.linspace(0, lanes, min(workers, lanes) + 1).astype(int)
        chunks = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        with ThreadPoolExecutor(max_workers=len(chunks)) as ex:
            parts = list(ex.map(lambda c: _blelloch(a2[c[0]:c[1]], b2[c[0]:c[1]]), chunks))
        out = np.concatenate(parts, axis=0)
    return out.reshape(shape)


def reverse_scan(a, b=None, *, threads: int | None = None) -> np.ndarray:
    """Tree-structured scan of ``g[t] = a[t] g[t+1] + b[t]`` with ``g[L] = 0``."""
    a, b = _as_lane(a, b)
    return parallel_scan(a[..., ::-1], b[..., ::-1], threads=threads)[..., ::-1]


def apply_boundary_reset(a, position_indices) -> np.ndarray:
    """Zero the scan coefficient wherever a sequence starts (position index 0)."""
    a = np.asarray(a)
    idx = np.asarray(position_indices)
    try:
        np.broadcast_shapes(a.shape, idx.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: coefficients {a.shape} vs indices {idx.shape}") from None
    return np.where(idx == 0, np.zeros((), dtype=a.dtype), a)
