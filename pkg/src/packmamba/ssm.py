"""Selective state-space model: zero-order-hold discretization, packed scan forward/backward.

Shapes (packed): ``x``, ``delta`` are ``(packs, L, channels)``; ``B_in``, ``C_in`` are
``(packs, L, states)``; ``A`` is ``(channels, states)``; ``D_skip`` is ``(channels,)``.
The per-sequence oracles take the same arrays without the leading pack axis.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .scan import apply_boundary_reset, parallel_scan, reverse_scan

TAYLOR_CUTOFF = 1e-4


@dataclass(frozen=True)
class SSMParams:
    A: np.ndarray
    delta: np.ndarray
    B_in: np.ndarray
    C_in: np.ndarray
    D_skip: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, np.asarray(getattr(self, f.name)))
        ch, st = self.A.shape
        lead = self.x.shape[:-1]
        if self.x.shape[-1] != ch:
            raise ValueError(f"x has {self.x.shape[-1]} channels, A expects {ch}")
        if self.delta.shape != self.x.shape:
            raise ValueError(f"delta shape {self.delta.shape} != x shape {self.x.shape}")
        for name in ("B_in", "C_in"):
            arr = getattr(self, name)
            if arr.shape != lead + (st,):
                raise ValueError(f"{name} shape {arr.shape}, expected {lead + (st,)}")
        if self.D_skip.shape != (ch,):
            raise ValueError(f"D_skip shape {self.D_skip.shape}, expected ({ch},)")
        if np.any(self.delta < 0):
            raise ValueError("invalid step size: delta must be non-negative")

    @property
    def channels(self) -> int:
        return self.A.shape[0]

    @property
    def states(self) -> int:
        return self.A.shape[1]

    def replace(self, **changes) -> "SSMParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class SSMGrads:
    x: np.ndarray
    delta: np.ndarray
    A: np.ndarray
    B_in: np.ndarray
    C_in: np.ndarray
    D_skip: np.ndarray


def _phi(z):
    """(exp(z) - 1) / z, continuous at 0."""
    z = np.asarray(z)
    small = np.abs(z) < TAYLOR_CUTOFF
    safe = np.where(small, 1.0, z)
    return np.where(small, 1 + z / 2 + z * z / 6, np.expm1(safe) / safe).astype(z.dtype, copy=False)


def _dphi(z):
    """Derivative of :func:`_phi`."""
    z = np.asarray(z)
    small = np.abs(z) < TAYLOR_CUTOFF
    safe = np.where(small, 1.0, z)
    direct = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    return np.where(small, 0.5 + z / 3 + z * z / 8, direct).astype(z.dtype, copy=False)


def discretize(delta, a, b):
    """Zero-order hold: ``a_bar = exp(delta*a)``, ``b_bar = (exp(z)-1)/z * delta * b``, ``z = delta*a``."""
    delta = np.asarray(delta)
    if np.any(delta < 0):
        raise ValueError("invalid step size: delta must be non-negative")
    z = delta * np.asarray(a)
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float64)
    a_bar = np.exp(z)
    b_bar = _phi(z) * delta * b
    if a_bar.ndim == 0:
        return a_bar.item(), np.asarray(b_bar).item()
    return a_bar, b_bar


def _lanes(p: SSMParams):
    """Per-lane discretized coefficients, shaped ``(..., L, channels, states)``."""
    z = p.delta[..., :, None] * p.A
    a_bar = np.exp(z)
    b_bar = _phi(z) * p.delta[..., :, None] * p.B_in[..., None, :]
    return z, a_bar, b_bar


def _to_time_last(t):
    return np.moveaxis(t, -3, -1)


def _from_time_last(t):
    return np.moveaxis(t, -1, -3)


def _reset_mask(position_indices, ndim_extra=2):
    idx = np.asarray(position_indices)
    return idx.reshape(idx.shape + (1,) * ndim_extra)


def ssm_states_packed(params: SSMParams, position_indices) -> np.ndarray:
    """Hidden states ``h`` shaped ``(packs, L, channels, states)`` with boundary reset."""
    _check_indices(params, position_indices)
    _, a_bar, b_bar = _lanes(params)
    a_bar = apply_boundary_reset(a_bar, _reset_mask(position_indices))
    bu = b_bar * params.x[..., None]
    h = parallel_scan(_to_time_last(a_bar), _to_time_last(bu))
    return _from_time_last(h)


def _readout(params: SSMParams, h):
    return np.einsum("...tdn,...tn->...td", h, params.C_in) + params.D_skip * params.x


def ssm_forward_packed(params: SSMParams, position_indices) -> np.ndarray:
    """Packed selective-scan forward; state never crosses a position-index-0 slot."""
    h = ssm_states_packed(params, position_indices)
    return _readout(params, h)


def _check_indices(params: SSMParams, position_indices):
    idx = np.asarray(position_indices)
    if idx.shape != params.x.shape[:-1]:
        raise ValueError(f"position_indices shape {idx.shape} does not match x {params.x.shape[:-1]}")


def ssm_forward_serial(params: SSMParams) -> np.ndarray:
    """Step-by-step reference for one unpacked sequence (``x`` shaped ``(L, channels)``)."""
    if params.x.ndim != 2:
        raise ValueError(f"serial oracle expects one sequence (L, channels), got {params.x.shape}")
    L = params.x.shape[0]
    h = np.zeros(params.A.shape, dtype=np.result_type(params.x, params.A, params.delta))
    y = np.empty_like(params.x, dtype=h.dtype)
    for t in range(L):
        a_bar, b_bar = discretize(params.delta[t][:, None], params.A, params.B_in[t][None, :])
        h = a_bar * h + b_bar * params.x[t][:, None]
        y[t] = h @ params.C_in[t] + params.D_skip * params.x[t]
    return y


def ssm_backward_packed(params: SSMParams, position_indices, dy) -> SSMGrads:
    """Gradients of ``sum(dy * ssm_forward_packed(params, idx))`` w.r.t. every input.

    The adjoint state runs right-to-left through the same boundary-reset
    coefficients shifted by one slot, so no gradient crosses a sequence start.
    """
    _check_indices(params, position_indices)
    dy = np.asarray(dy)
    if dy.shape != params.x.shape:
        raise ValueError(f"dy shape {dy.shape} != output shape {params.x.shape}")
    z, a_raw, b_bar = _lanes(params)
    starts = _reset_mask(position_indices) == 0
    a_bar = np.where(starts, np.zeros((), a_raw.dtype), a_raw)
    bu = b_bar * params.x[..., None]
    h = _from_time_last(parallel_scan(_to_time_last(a_bar), _to_time_last(bu)))

    # adjoint: g[t] = a_bar[t+1] g[t+1] + C[t] dy[t]
    a_next = np.zeros_like(a_bar)
    a_next[..., :-1, :, :] = a_bar[..., 1:, :, :]
    direct = dy[..., None] * params.C_in[..., None, :]
    g = _from_time_last(reverse_scan(_to_time_last(a_next), _to_time_last(direct)))

    h_prev = np.zeros_like(h)
    h_prev[..., 1:, :, :] = h[..., :-1, :, :]
    # reset slots hold a constant 0 coefficient: nothing flows to delta or A there
    d_abar = np.where(starts, np.zeros((), h.dtype), g * h_prev)
    d_bbar = g * params.x[..., None]

    dz_from_a = d_abar * a_raw
    dx = np.einsum("...tdn,...tdn->...td", g, b_bar) + params.D_skip * dy
    # d b_bar / d delta = B exp(z);  d b_bar / d A = B delta^2 phi'(z)
    B = params.B_in[..., None, :]
    ddelta = (np.einsum("...tdn,dn->...td", dz_from_a, params.A)
              + np.einsum("...tdn,...tdn->...td", d_bbar * B, a_raw))
    delta = params.delta[..., None]
    dA_terms = dz_from_a * delta + d_bbar * B * delta * delta * _dphi(z)
    dA = dA_terms.reshape(-1, *params.A.shape).sum(axis=0)
    dB = np.einsum("...tdn,...tdn->...tn", d_bbar, _phi(z) * delta)
    dC = np.einsum("...td,...tdn->...tn", dy, h)
    dD = (dy * params.x).reshape(-1, params.channels).sum(axis=0)
    return SSMGrads(x=dx, delta=ddelta, A=dA, B_in=dB, C_in=dC, D_skip=dD)


def ssm_backward_serial(params: SSMParams, dy) -> SSMGrads:
    """Step-by-step adjoint for one unpacked sequence; oracle for the packed backward."""
    if params.x.ndim != 2:
        raise ValueError(f"serial oracle expects one sequence (L, channels), got {params.x.shape}")
    dy = np.asarray(dy)
    L = params.x.shape[0]
    A = params.A
    hs = []
    h = np.zeros(A.shape, dtype=np.result_type(params.x, A, params.delta))
    for t in range(L):
        a_bar, b_bar = discretize(params.delta[t][:, None], A, params.B_in[t][None, :])
        h = a_bar * h + b_bar * params.x[t][:, None]
        hs.append(h)

    dx = np.zeros_like(params.x, dtype=h.dtype)
    ddelta = np.zeros_like(dx)
    dA = np.zeros_like(A, dtype=h.dtype)
    dB = np.zeros_like(params.B_in, dtype=h.dtype)
    dC = np.zeros_like(params.C_in, dtype=h.dtype)
    dD = np.zeros_like(params.D_skip, dtype=h.dtype)
    g = np.zeros_like(h)
    for t in range(L - 1, -1, -1):
        d = params.delta[t][:, None]
        z = d * A
        a_bar = np.exp(z)
        phi = _phi(z)
        Bt = params.B_in[t][None, :]
        b_bar = phi * d * Bt
        xt = params.x[t][:, None]
        if t + 1 < L:
            a_next = np.exp(params.delta[t + 1][:, None] * A)
            g = a_next * g + dy[t][:, None] * params.C_in[t][None, :]
        else:
            g = dy[t][:, None] * params.C_in[t][None, :]
        h_prev = hs[t - 1] if t > 0 else np.zeros_like(h)
        dC[t] = dy[t] @ hs[t]
        dD += dy[t] * params.x[t]
        dx[t] = (g * b_bar).sum(axis=1) + params.D_skip * dy[t]
        gx = g * xt
        dz = g * h_prev * a_bar
        ddelta[t] = (dz * A).sum(axis=1) + (gx * Bt * a_bar).sum(axis=1)
        dA += dz * d + gx * Bt * d * d * _dphi(z)
        dB[t] = (gx * phi * d).sum(axis=0)
    return SSMGrads(x=dx, delta=ddelta, A=dA, B_in=dB, C_in=dC, D_skip=dD)
