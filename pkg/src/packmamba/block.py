"""Mamba block assembled from pack-aware operators, plus the operator registry and PUI checker.

Element-wise and token-wise operators ignore position indices; only the
sequence-wise ones (conv, SSM) consume them.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from .conv import ConvParams, conv1d_pack_backward, conv1d_pack_forward, conv1d_serial
from .packing import PackedBatch, PackPlan, SequenceBatch, compute_reverse_indices, pack, unpack
from .ssm import SSMParams, ssm_backward_packed, ssm_forward_packed, ssm_forward_serial

RMS_EPS = 1e-6


class OperatorClass(enum.Enum):
    ELEMENT_WISE = "element-wise"
    TOKEN_WISE = "token-wise"
    SEQUENCE_WISE = "sequence-wise"


# --- element-wise / token-wise operators -------------------------------------------------

def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def silu(x):
    return x * sigmoid(x)


def softplus(x):
    x = np.asarray(x)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def _dsilu(x):
    s = sigmoid(x)
    return s * (1 + x * (1 - s))


def linear(x, weight, bias=None):
    x = np.asarray(x)
    weight = np.asarray(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"cannot apply weight {weight.shape} to input {x.shape}")
    # Fixed-order accumulation instead of BLAS: matmul kernels round differently
    # depending on how many rows they see, which would break bit-exact repacking.
    y = x[..., 0:1] * weight[0]
    for i in range(1, weight.shape[0]):
        y = y + x[..., i:i + 1] * weight[i]
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"bias shape {bias.shape} does not match output dim {weight.shape[1]}")
        y = y + bias
    return y


def rmsnorm(x, weight, eps: float = RMS_EPS):
    x = np.asarray(x)
    scale = 1 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * scale * weight


# --- block parameters --------------------------------------------------------------------

@dataclass(frozen=True)
class BlockParams:
    norm_weight: np.ndarray  # (d,)
    in_proj: np.ndarray  # (d, 2E)
    conv_weight: np.ndarray  # (E, W)
    conv_bias: np.ndarray  # (E,)
    x_proj: np.ndarray  # (E, R + 2N)
    dt_proj: np.ndarray  # (R, E)
    dt_bias: np.ndarray  # (E,)
    A: np.ndarray  # (E, N)
    D_skip: np.ndarray  # (E,)
    out_proj: np.ndarray  # (E, d)

    def __post_init__(self):
        d = self.norm_weight.shape[0]
        E, N, R = self.expanded_dim, self.state_dim, self.dt_rank
        expected = {
            "in_proj": (d, 2 * E), "conv_weight": (E, self.conv_width), "conv_bias": (E,),
            "x_proj": (E, R + 2 * N), "dt_proj": (R, E), "dt_bias": (E,), "A": (E, N),
            "D_skip": (E,), "out_proj": (E, d),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} has shape {got}, expected {shape}")

    @property
    def model_dim(self) -> int:
        return self.norm_weight.shape[0]

    @property
    def expanded_dim(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    @property
    def conv_width(self) -> int:
        return self.conv_weight.shape[1]

    @property
    def dt_rank(self) -> int:
        return self.dt_proj.shape[0]

    @property
    def conv(self) -> ConvParams:
        return ConvParams(self.conv_weight, self.conv_bias)

    def astype(self, dtype) -> "BlockParams":
        return BlockParams(**{f.name: getattr(self, f.name).astype(dtype) for f in fields(self)})

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def dt_rank_for(model_dim: int) -> int:
    return math.ceil(model_dim / 16)


def init_block_params(model_dim: int = 64, expansion: int = 2, state_dim: int = 16,
                      conv_width: int = 4, seed: int = 0, dtype=np.float64) -> BlockParams:
    """Seeded uniform(-0.1, 0.1) weights; ``A = -exp(.)`` for stable dynamics; norm weight 1."""
    rng = np.random.default_rng(seed)
    E = expansion * model_dim
    R = dt_rank_for(model_dim)

    def u(*shape):
        return rng.uniform(-0.1, 0.1, size=shape).astype(dtype)

    return BlockParams(
        norm_weight=np.ones(model_dim, dtype=dtype),
        in_proj=u(model_dim, 2 * E),
        conv_weight=u(E, conv_width),
        conv_bias=u(E),
        x_proj=u(E, R + 2 * state_dim),
        dt_proj=u(R, E),
        dt_bias=u(E),
        A=(-np.exp(u(E, state_dim))).astype(dtype),
        D_skip=u(E),
        out_proj=u(E, model_dim),
    )


# --- FLOP counting -----------------------------------------------------------------------

class FlopCounter:
    """Tallies floating-point operations per operator from the shapes actually processed."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def add(self, op: str, flops: int) -> None:
        self.counts[op] = self.counts.get(op, 0) + int(flops)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


# per-element costs shared with the analytic model in ``flops``
SILU_FLOPS = 4
SOFTPLUS_FLOPS = 3
DISCRETIZE_FLOPS = 7  # z, exp, expm1/z, and the three products forming b_bar * x
SCAN_FLOPS = 2  # one multiply-add per recurrence step


def rms_flops(tokens, dim):
    return tokens * (4 * dim + 3)


def linear_flops(tokens, n_in, n_out, bias=False):
    return tokens * (2 * n_in * n_out + (n_out if bias else 0))


# --- block forward / backward -----------------------------------------------------------

@dataclass
class _Cache:
    x: np.ndarray
    scale: np.ndarray
    normed: np.ndarray
    u0: np.ndarray
    z: np.ndarray
    uc: np.ndarray
    u: np.ndarray
    dt_low: np.ndarray
    dt_pre: np.ndarray
    ssm: SSMParams
    ys: np.ndarray
    gate: np.ndarray
    yg: np.ndarray


def _block(x, params: BlockParams, conv_fn, ssm_fn, counter: FlopCounter | None = None):
    d, E, N, R, W = (params.model_dim, params.expanded_dim, params.state_dim,
                     params.dt_rank, params.conv_width)
    if x.shape[-1] != d:
        raise ValueError(f"input has {x.shape[-1]} features, block expects {d}")
    tokens = int(np.prod(x.shape[:-1]))

    scale = 1 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    normed = x * scale
    h = normed * params.norm_weight
    xz = linear(h, params.in_proj)
    u0, z = xz[..., :E], xz[..., E:]
    uc = conv_fn(u0, params.conv)
    u = silu(uc)
    xdbl = linear(u, params.x_proj)
    dt_low, Bm, Cm = xdbl[..., :R], xdbl[..., R:R + N], xdbl[..., R + N:]
    dt_pre = linear(dt_low, params.dt_proj, params.dt_bias)
    delta = softplus(dt_pre)
    sp = SSMParams(A=params.A, delta=delta, B_in=Bm, C_in=Cm, D_skip=params.D_skip, x=u)
    ys = ssm_fn(sp)
    gate = silu(z)
    yg = ys * gate
    out = linear(yg, params.out_proj) + x

    if counter is not None:
        counter.add("rmsnorm", rms_flops(tokens, d))
        counter.add("in_proj", linear_flops(tokens, d, 2 * E))
        counter.add("conv1d", tokens * E * 2 * W)
        counter.add("silu", tokens * E * SILU_FLOPS * 2)
        counter.add("x_proj", linear_flops(tokens, E, R + 2 * N))
        counter.add("dt_proj", linear_flops(tokens, R, E, bias=True))
        counter.add("softplus", tokens * E * SOFTPLUS_FLOPS)
        counter.add("discretize", delta.size * N * DISCRETIZE_FLOPS)
        counter.add("scan", delta.size * N * SCAN_FLOPS)
        counter.add("ssm_readout", ys.size * (2 * N + 2))
        counter.add("gate", yg.size)
        counter.add("out_proj", linear_flops(tokens, E, d))
        counter.add("residual", out.size)

    cache = _Cache(x, scale, normed, u0, z, uc, u, dt_low, dt_pre, sp, ys, gate, yg)
    return out, cache


def mamba_block_packed(data, params: BlockParams, position_indices,
                       counter: FlopCounter | None = None) -> np.ndarray:
    """Block forward on packed ``(packs, L, d)`` data; indices reach only conv and SSM."""
    data = np.asarray(data)
    idx = np.asarray(position_indices)
    out, _ = _block(data, params,
                    lambda v, cp: conv1d_pack_forward(v, cp, idx),
                    lambda sp: ssm_forward_packed(sp, idx), counter)
    return out


def mamba_block_serial(seq, params: BlockParams) -> np.ndarray:
    """Block forward on one unpacked ``(L, d)`` sequence, built from the serial oracles."""
    seq = np.asarray(seq)
    out, _ = _block(seq, params, conv1d_serial, ssm_forward_serial)
    return out


def mamba_block_forward(x, params: BlockParams, position_indices=None):
    """Dispatch on input kind: PackedBatch, SequenceBatch, or a raw packed array with indices."""
    if isinstance(x, PackedBatch):
        return x.with_data(mamba_block_packed(x.data, params, x.position_indices))
    if isinstance(x, SequenceBatch):
        return SequenceBatch(tuple(mamba_block_serial(s, params) for s in x.sequences))
    if position_indices is None:
        raise ValueError("raw array input needs position_indices")
    return mamba_block_packed(x, params, position_indices)


def mamba_block_backward(data, params: BlockParams, position_indices, dout):
    """Gradients of ``sum(dout * mamba_block_packed(data))``.

    Returns ``(dx, grads)`` where ``grads`` maps each BlockParams field to its gradient.
    """
    data = np.asarray(data)
    idx = np.asarray(position_indices)
    dout = np.asarray(dout)
    _, c = _block(data, params,
                  lambda v, cp: conv1d_pack_forward(v, cp, idx),
                  lambda sp: ssm_forward_packed(sp, idx))
    E, N, R, d = params.expanded_dim, params.state_dim, params.dt_rank, params.model_dim

    def flat(t):
        return t.reshape(-1, t.shape[-1])

    grads = {}
    grads["out_proj"] = flat(c.yg).T @ flat(dout)
    dyg = dout @ params.out_proj.T
    dys = dyg * c.gate
    dz = dyg * c.ys * _dsilu(c.z)

    sg = ssm_backward_packed(c.ssm, idx, dys)
    grads["A"] = sg.A
    grads["D_skip"] = sg.D_skip
    ddt_pre = sg.delta * sigmoid(c.dt_pre)
    grads["dt_proj"] = flat(c.dt_low).T @ flat(ddt_pre)
    grads["dt_bias"] = flat(ddt_pre).sum(axis=0)
    ddt_low = ddt_pre @ params.dt_proj.T
    dxdbl = np.concatenate([ddt_low, sg.B_in, sg.C_in], axis=-1)
    grads["x_proj"] = flat(c.u).T @ flat(dxdbl)
    du = sg.x + dxdbl @ params.x_proj.T
    duc = du * _dsilu(c.uc)

    rev = compute_reverse_indices(idx)
    du0, grads["conv_weight"], grads["conv_bias"] = conv1d_pack_backward(c.u0, params.conv, idx, rev, duc)

    dxz = np.concatenate([du0, dz], axis=-1)
    h = c.normed * params.norm_weight
    grads["in_proj"] = flat(h).T @ flat(dxz)
    dh = dxz @ params.in_proj.T
    grads["norm_weight"] = flat(dh * c.normed).sum(axis=0)
    dn = dh * params.norm_weight
    s = c.scale
    dx = s * dn - s ** 3 * c.x * np.sum(dn * c.x, axis=-1, keepdims=True) / d
    dx = dx + dout
    return dx, grads


# --- operator registry and PUI checking --------------------------------------------------

@dataclass(frozen=True)
class Operator:
    """A named operator over packed ``(..., L, C)`` data with position indices ``(..., L)``.

    ``reference`` (optional) evaluates one unpacked ``(L, C)`` sequence independently;
    without it the packed kernel is run on the lone sequence.
    """

    name: str
    op_class: OperatorClass
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    reference: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, data, position_indices):
        return self.fn(np.asarray(data), np.asarray(position_indices))

    def on_sequence(self, seq):
        seq = np.asarray(seq)
        if self.reference is not None:
            return self.reference(seq)
        return self.fn(seq[None], np.arange(seq.shape[0])[None])[0]


REGISTRY: dict[str, Operator] = {}


def register(op: Operator) -> Operator:
    if not isinstance(op.op_class, OperatorClass):
        raise TypeError(f"operator {op.name!r} must carry an OperatorClass")
    REGISTRY[op.name] = op
    return op


register(Operator("sigmoid", OperatorClass.ELEMENT_WISE, lambda x, _: sigmoid(x)))
register(Operator("silu", OperatorClass.ELEMENT_WISE, lambda x, _: silu(x)))
register(Operator("softplus", OperatorClass.ELEMENT_WISE, lambda x, _: softplus(x)))


def linear_operator(weight, bias=None) -> Operator:
    return Operator("linear", OperatorClass.TOKEN_WISE, lambda x, _: linear(x, weight, bias))


def rmsnorm_operator(weight) -> Operator:
    return Operator("rmsnorm", OperatorClass.TOKEN_WISE, lambda x, _: rmsnorm(x, weight))


def conv_operator(params: ConvParams) -> Operator:
    return Operator("conv1d_pack", OperatorClass.SEQUENCE_WISE,
                    lambda x, idx: conv1d_pack_forward(x, params, idx),
                    lambda s: conv1d_serial(s, params))


def unmasked_conv_operator(params: ConvParams) -> Operator:
    """Boundary-blind conv; violates PUI whenever width >= 2 and a pack holds two sequences."""
    from .conv import conv1d_unmasked_forward
    return Operator("conv1d_unmasked", OperatorClass.SEQUENCE_WISE,
                    lambda x, idx: conv1d_unmasked_forward(x, params),
                    lambda s: conv1d_serial(s, params))


def _selective(u, params: BlockParams) -> SSMParams:
    R, N = params.dt_rank, params.state_dim
    xdbl = linear(u, params.x_proj)
    delta = softplus(linear(xdbl[..., :R], params.dt_proj, params.dt_bias))
    return SSMParams(A=params.A, delta=delta, B_in=xdbl[..., R:R + N], C_in=xdbl[..., R + N:],
                     D_skip=params.D_skip, x=u)


def ssm_operator(params: BlockParams) -> Operator:
    """Selective SSM on ``expanded_dim`` channels: projections for delta/B/C, then the scan."""
    return Operator("ssm_pack", OperatorClass.SEQUENCE_WISE,
                    lambda u, idx: ssm_forward_packed(_selective(u, params), idx),
                    lambda s: ssm_forward_serial(_selective(s, params)))


def block_operator(params: BlockParams) -> Operator:
    return Operator("mamba_block", OperatorClass.SEQUENCE_WISE,
                    lambda x, idx: mamba_block_packed(x, params, idx),
                    lambda s: mamba_block_serial(s, params))


@dataclass(frozen=True)
class PUIReport:
    passed: bool
    max_abs_dev: float
    max_rel_dev: float
    worst_location: tuple[int, int, int]  # (sequence id, position, channel)
    tolerance: float

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_abs_dev": self.max_abs_dev,
            "max_rel_dev": self.max_rel_dev,
            "worst_location": list(self.worst_location),
            "tolerance": self.tolerance,
        }


def compare_sequences(got, expected, tolerance: float) -> PUIReport:
    """Deviation report between two lists of per-sequence outputs.

    Relative deviation is the worst absolute deviation divided by the largest
    reference magnitude across the whole batch.
    """
    worst, where, scale = 0.0, (0, 0, 0), 0.0
    for i, (g, e) in enumerate(zip(got, expected)):
        g = np.asarray(g, dtype=np.float64)
        e = np.asarray(e, dtype=np.float64)
        if g.shape != e.shape:
            return PUIReport(False, math.inf, math.inf, (i, 0, 0), tolerance)
        scale = max(scale, float(np.max(np.abs(e))) if e.size else 0.0)
        dev = np.abs(g - e)
        if not np.all(np.isfinite(dev)):
            pos = np.unravel_index(np.argmax(~np.isfinite(dev)), dev.shape)
            return PUIReport(False, math.inf, math.inf, (i, int(pos[0]), int(pos[-1])), tolerance)
        k = int(np.argmax(dev))
        if dev.flat[k] > worst:
            worst = float(dev.flat[k])
            pos = np.unravel_index(k, dev.shape)
            where = (i, int(pos[0]), int(pos[-1]))
    rel = worst / scale if scale > 0 else (0.0 if worst == 0 else math.inf)
    return PUIReport(rel <= tolerance, worst, rel, where, tolerance)


def pui_check(operator: Operator, batch, plan: PackPlan, tolerance: float) -> PUIReport:
    """Compare ``unpack(op(pack(S)))`` against ``op`` applied to each sequence alone."""
    if not isinstance(batch, SequenceBatch):
        batch = SequenceBatch(tuple(batch))
    packed = pack(batch, plan)
    out = operator(packed.data, packed.position_indices)
    got = unpack(packed, out).sequences
    expected = [operator.on_sequence(s) for s in batch.sequences]
    return compare_sequences(got, expected, tolerance)
