"""Synthetic length distributions, packing-strategy comparison, and scan profiling."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr, ndtri

from .flops import PRESETS, ModelConfig, flops_estimate
from .packing import (PackPlan, padding_rate, plan_fifo, plan_greedy_sorted,
                      plan_pad_to_max)
from .scan import get_num_threads, parallel_scan

log = logging.getLogger(__name__)

KINDS = ("uniform-range", "truncated-lognormal", "file")
MEAN_TOLERANCE = 0.02


@dataclass(frozen=True)
class LengthDistributionSpec:
    kind: str = "truncated-lognormal"
    min_len: int = 57
    max_len: int = 2048
    target_mean: float | None = 646.0
    sample_count: int = 100_000
    seed: int = 0
    sigma: float = 1.0
    path: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown length distribution kind {self.kind!r}; choose from {KINDS}")
        if self.kind == "file":
            if not self.path:
                raise ValueError("kind 'file' needs a path")
            return
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if self.target_mean is not None and not self.min_len <= self.target_mean <= self.max_len:
            raise ValueError(f"infeasible spec: target mean {self.target_mean} outside "
                             f"[{self.min_len}, {self.max_len}]")
        if self.kind == "truncated-lognormal" and self.target_mean is None:
            raise ValueError("truncated-lognormal needs a target_mean")


def _lognormal_lengths(mu, sigma, u, lo, hi):
    a = ndtr((math.log(lo) - mu) / sigma)
    b = ndtr((math.log(hi) - mu) / sigma)
    z = ndtri(a + u * (b - a))
    return np.clip(np.rint(np.exp(mu + sigma * z)), lo, hi).astype(np.int64)


def gen_lengths(spec: LengthDistributionSpec) -> list[int]:
    """Draw sequence lengths; deterministic for a fixed seed."""
    if spec.kind == "file":
        text = Path(spec.path).read_text().strip()
        values = json.loads(text) if text.startswith("[") else text.split()
        lengths = [int(v) for v in values]
        if not lengths or min(lengths) < 1:
            raise ValueError(f"{spec.path}: lengths must be positive integers")
        return lengths

    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.min_len, spec.max_len
    if spec.kind == "uniform-range":
        return rng.integers(lo, hi + 1, size=spec.sample_count).tolist()

    if lo == hi:
        return [lo] * spec.sample_count
    # Fixed uniforms make the sample mean monotone in mu, so bisection on mu
    # hits the target on this very sample.
    u = rng.random(spec.sample_count)
    target = spec.target_mean
    left = math.log(lo) - 6 * spec.sigma
    right = math.log(hi) + 6 * spec.sigma
    best = None
    for _ in range(80):
        mid = (left + right) / 2
        lengths = _lognormal_lengths(mid, spec.sigma, u, lo, hi)
        m = lengths.mean()
        if best is None or abs(m - target) < abs(best.mean() - target):
            best = lengths
        if m < target:
            left = mid
        else:
            right = mid
    if abs(best.mean() - target) > MEAN_TOLERANCE * target:
        raise ValueError(f"could not match target mean {target} within 2% "
                         f"(got {best.mean():.2f}); widen the range or draw more samples")
    return best.tolist()


@dataclass
class StrategyRow:
    strategy: str
    capacity: int
    num_packs: int
    tokens: int
    slots: int
    padding_rate: float
    total_flops: int
    wall_time_seconds: float | None = None


@dataclass
class BenchReport:
    rows: list[StrategyRow]
    environment: dict = field(default_factory=dict)

    def to_dict(self, timing: bool = True) -> dict:
        rows = []
        for r in self.rows:
            d = asdict(r)
            if not timing:
                d.pop("wall_time_seconds")
            rows.append(d)
        return {"environment": dict(self.environment), "rows": rows}

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True)

    def to_csv(self, timing: bool = True) -> str:
        rows = self.to_dict(timing)["rows"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()

    def to_text(self, timing: bool = True) -> str:
        return format_table(self.to_dict(timing)["rows"])


# JSON schema for BenchReport documents (``to_dict``).
BENCH_REPORT_SCHEMA = {
    "type": "object",
    "required": ["environment", "rows"],
    "properties": {
        "environment": {
            "type": "object",
            "required": ["precision", "threads", "seed"],
        },
        "rows": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["strategy", "capacity", "num_packs", "tokens", "slots",
                             "padding_rate", "total_flops"],
                "properties": {
                    "strategy": {"enum": ["pad-to-max", "fifo-pack", "greedy-pack"]},
                    "capacity": {"type": "integer", "minimum": 1},
                    "num_packs": {"type": "integer", "minimum": 1},
                    "tokens": {"type": "integer", "minimum": 1},
                    "slots": {"type": "integer", "minimum": 1},
                    "padding_rate": {"type": "number", "minimum": 0, "maximum": 1},
                    "total_flops": {"type": "integer", "exclusiveMinimum": 0},
                    "wall_time_seconds": {"type": ["number", "null"], "minimum": 0},
                },
            },
        },
    },
}


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    cells = [[fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(v.rjust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)


STRATEGIES = {
    "pad-to-max": plan_pad_to_max,
    "fifo-pack": plan_fifo,
    "greedy-pack": plan_greedy_sorted,
}


def compare_strategies(lengths, capacity: int, pad_capacity: int | None = None,
                       model: ModelConfig | None = None, environment: dict | None = None) -> BenchReport:
    """Padding rate and FLOPs for the padded baseline and both packing strategies.

    ``pad_capacity`` is the padded length of the baseline; by default every
    sequence is padded to the longest one in ``lengths``.
    """
    lengths = [int(n) for n in lengths]
    if not lengths:
        raise ValueError("need at least one sequence length")
    pad_capacity = pad_capacity or max(lengths)
    model = model or PRESETS["mamba-1.4b"]
    rows = []
    for name, planner in STRATEGIES.items():
        cap = pad_capacity if name == "pad-to-max" else capacity
        t0 = time.perf_counter()
        plan: PackPlan = planner(lengths, cap)
        elapsed = time.perf_counter() - t0
        rows.append(StrategyRow(
            strategy=name, capacity=cap, num_packs=plan.num_packs, tokens=plan.total_tokens,
            slots=plan.total_slots, padding_rate=padding_rate(plan),
            total_flops=flops_estimate(model, plan), wall_time_seconds=elapsed,
        ))
    env = {"precision": "f64", "threads": get_num_threads(), "seed": None, "model": model.name}
    env.update(environment or {})
    return BenchReport(rows, env)


def profile_scan(lengths, channels: int = 16, states: int = 16, precision: str = "f32",
                 repeats: int = 5, warmup: int = 1, seed: int = 0) -> list[dict]:
    """Median wall time of ``parallel_scan`` over ``channels * states`` lanes per length."""
    if repeats < 5:
        raise ValueError("profile needs at least 5 repetitions")
    dtype = np.float32 if precision == "f32" else np.float64
    rng = np.random.default_rng(seed)
    rows = []
    for L in lengths:
        L = int(L)
        a = rng.uniform(0, 1, size=(channels * states, L)).astype(dtype)
        b = rng.uniform(-1, 1, size=(channels * states, L)).astype(dtype)
        for _ in range(warmup):
            parallel_scan(a, b)
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            parallel_scan(a, b)
            times.append(time.perf_counter() - t0)
        med = max(statistics.median(times), 1e-9)
        rows.append({"seqlen": L, "wall_time": med, "throughput": a.size / med})
    for prev, cur in zip(rows, rows[1:]):
        if cur["seqlen"] == 2 * prev["seqlen"]:
            log.debug("seqlen %d -> %d: throughput %.3g -> %.3g elem/s", prev["seqlen"],
                      cur["seqlen"], prev["throughput"], cur["throughput"])
    return rows
