"""Packing-aware causal depthwise 1-D convolution.

Packed tensors are ``(packs, L, channels)``. ``weight[:, width-1]`` multiplies the
current element; ``weight[:, width-1-o]`` multiplies the element ``o`` slots back.
A term is kept only if ``o <= position_indices[i]``, i.e. it stays inside the
current sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ConvParams:
    weight: np.ndarray  # (channels, width)
    bias: np.ndarray  # (channels,)

    def __post_init__(self):
        w = np.asarray(self.weight)
        b = np.asarray(self.bias)
        if w.ndim != 2 or w.shape[1] < 1:
            raise ValueError(f"weight must be (channels, width>=1), got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} channels")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def width(self) -> int:
        return self.weight.shape[1]

    @property
    def channels(self) -> int:
        return self.weight.shape[0]


def _shift_back(x, o):
    """``out[..., i, :] = x[..., i-o, :]``, zero where ``i < o``."""
    if o == 0:
        return x
    out = np.zeros_like(x)
    out[..., o:, :] = x[..., :-o, :]
    return out


def _shift_fwd(x, o):
    """``out[..., i, :] = x[..., i+o, :]``, zero past the end."""
    if o == 0:
        return x
    out = np.zeros_like(x)
    out[..., :-o, :] = x[..., o:, :]
    return out


def _check(x, params: ConvParams, position_indices):
    if x.ndim < 2 or x.shape[-1] != params.channels:
        raise ValueError(f"x shape {x.shape} does not match {params.channels} channels")
    idx = np.asarray(position_indices)
    if idx.shape != x.shape[:-1]:
        raise ValueError(f"position_indices shape {idx.shape} does not match x {x.shape[:-1]}")
    return idx


def conv1d_pack_forward(x, params: ConvParams, position_indices) -> np.ndarray:
    x = np.asarray(x)
    idx = _check(x, params, position_indices)
    W = params.width
    zero = np.zeros((), dtype=x.dtype)
    y = np.zeros(x.shape, dtype=np.result_type(x, params.weight))
    for o in range(W):
        keep = (idx >= o)[..., None]
        y += params.weight[:, W - 1 - o] * np.where(keep, _shift_back(x, o), zero)
    return y + params.bias


def conv1d_pack_backward(x, params: ConvParams, position_indices, reverse_indices, dy):
    """Returns ``(dx, dweight, dbias)`` for the loss ``sum(dy * forward(x))``."""
    x = np.asarray(x)
    dy = np.asarray(dy)
    idx = _check(x, params, position_indices)
    rev = np.asarray(reverse_indices)
    if rev.shape != idx.shape or dy.shape != x.shape:
        raise ValueError("reverse_indices / dy shapes do not match the forward input")
    W = params.width
    zero = np.zeros((), dtype=dy.dtype)
    dx = np.zeros(x.shape, dtype=np.result_type(dy, params.weight))
    dweight = np.zeros(params.weight.shape, dtype=dx.dtype)
    for o in range(W):
        # slot p feeds output p+o only when that output is still in p's sequence
        fwd_ok = (rev >= o)[..., None]
        dx += params.weight[:, W - 1 - o] * np.where(fwd_ok, _shift_fwd(dy, o), zero)
        back_ok = (idx >= o)[..., None]
        contrib = np.where(back_ok, _shift_back(x, o) * dy, zero)
        dweight[:, W - 1 - o] = contrib.reshape(-1, x.shape[-1]).sum(axis=0)
    dbias = dy.reshape(-1, x.shape[-1]).sum(axis=0)
    return dx, dweight, dbias


def conv1d_unmasked_forward(x, params: ConvParams, position_indices=None) -> np.ndarray:
    """Plain causal conv over the whole packed row; leaks across sequence boundaries.

    Kept as a fault-injection baseline for PUI checks.
    """
    x = np.asarray(x)
    W = params.width
    y = np.zeros(x.shape, dtype=np.result_type(x, params.weight))
    for o in range(W):
        y += params.weight[:, W - 1 - o] * _shift_back(x, o)
    return y + params.bias


def conv1d_serial(x, params: ConvParams) -> np.ndarray:
    """Direct per-element loop for one sequence ``(L, channels)``; the conv oracle."""
    x = np.asarray(x)
    L, D = x.shape
    W = params.width
    y = np.empty((L, D), dtype=np.result_type(x, params.weight))
    for i in range(L):
        for d in range(D):
            acc = params.bias[d]
            for j in range(W):
                src = i - (W - 1) + j
                if src >= 0:
                    acc = acc + params.weight[d, j] * x[src, d]
            y[i, d] = acc
    return y
