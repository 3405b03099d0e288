"""Analytic forward FLOP model for stacks of Mamba blocks.

Costs are per processed slot, so a layout's FLOPs are proportional to its slot
count (padding included). Per-operator constants match the counters recorded by
``block.mamba_block_packed``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

from .block import (DISCRETIZE_FLOPS, SCAN_FLOPS, SILU_FLOPS, SOFTPLUS_FLOPS, dt_rank_for,
                    linear_flops, rms_flops)
from .packing import PackPlan


@dataclass(frozen=True)
class ModelConfig:
    name: str
    layers: int
    model_dim: int
    state_dim: int = 16
    conv_width: int = 4
    expansion: int = 2

    @property
    def expanded_dim(self) -> int:
        return self.expansion * self.model_dim

    @property
    def dt_rank(self) -> int:
        return dt_rank_for(self.model_dim)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(name=d["name"], layers=int(d["layers"]), model_dim=int(d["model_dim"]),
                   state_dim=int(d.get("state_dim", 16)), conv_width=int(d.get("conv_width", 4)),
                   expansion=int(d.get("expansion", 2)))


PRESETS: dict[str, ModelConfig] = {
    c.name: c for c in (
        ModelConfig("desk", layers=1, model_dim=64),
        ModelConfig("mamba-110m", layers=16, model_dim=1024),
        ModelConfig("mamba-1.4b", layers=48, model_dim=2048),
        ModelConfig("mamba-2.8b", layers=64, model_dim=2560),
    )
}


def default_config() -> dict:
    return {"presets": [asdict(c) for c in PRESETS.values()]}


def load_config(path: str | Path | None = None) -> dict[str, ModelConfig]:
    """Read model presets from a JSON config file; built-in presets when ``path`` is None."""
    if path is None:
        return dict(PRESETS)
    raw = json.loads(Path(path).read_text())
    presets = raw.get("presets", raw if isinstance(raw, list) else [])
    if not presets:
        raise ValueError(f"{path}: no model presets found")
    return {c.name: c for c in map(ModelConfig.from_dict, presets)}


def per_slot_breakdown(cfg: ModelConfig) -> dict[str, int]:
    """One layer's forward FLOPs for a single slot, by operator."""
    d, E, N, R, W = cfg.model_dim, cfg.expanded_dim, cfg.state_dim, cfg.dt_rank, cfg.conv_width
    return {
        "rmsnorm": rms_flops(1, d),
        "in_proj": linear_flops(1, d, 2 * E),
        "conv1d": 2 * W * E,
        "silu": 2 * SILU_FLOPS * E,
        "x_proj": linear_flops(1, E, R + 2 * N),
        "dt_proj": linear_flops(1, R, E, bias=True),
        "softplus": SOFTPLUS_FLOPS * E,
        "discretize": DISCRETIZE_FLOPS * E * N,
        "scan": SCAN_FLOPS * E * N,
        "ssm_readout": E * (2 * N + 2),
        "gate": E,
        "out_proj": linear_flops(1, E, d),
        "residual": d,
    }


def per_slot_flops(cfg: ModelConfig) -> int:
    return cfg.layers * sum(per_slot_breakdown(cfg).values())


def flops_for_slots(cfg: ModelConfig, slots: int) -> int:
    return per_slot_flops(cfg) * int(slots)


def flops_estimate(cfg: ModelConfig, plan: PackPlan) -> int:
    """Total forward FLOPs to run every pack of ``plan`` through the model."""
    return flops_for_slots(cfg, plan.total_slots)


def exact_padding_fraction(plan: PackPlan) -> Fraction:
    return Fraction(plan.total_slots - plan.total_tokens, plan.total_slots)


def flop_ratio(cfg: ModelConfig, packed: PackPlan, padded: PackPlan) -> Fraction:
    """Packed-over-padded FLOPs as an exact fraction."""
    return Fraction(flops_estimate(cfg, packed), flops_estimate(cfg, padded))
