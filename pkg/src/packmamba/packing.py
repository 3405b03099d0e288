"""Pack plans, pack/unpack along the sequence axis, and position/reverse indices."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class PackingError(ValueError):
    """Raised for invalid plans, capacity overflow, or corrupted packed layouts."""


@dataclass(frozen=True)
class SequenceBatch:
    """Variable-length sequences, each shaped ``(length, channels)``."""

    sequences: tuple[np.ndarray, ...]

    def __post_init__(self):
        seqs = tuple(np.asarray(s) for s in self.sequences)
        if not seqs:
            raise PackingError("batch must contain at least one sequence")
        for i, s in enumerate(seqs):
            if s.ndim != 2:
                raise PackingError(f"sequence {i} must be 2-D (length, channels), got shape {s.shape}")
            if s.shape[0] < 1:
                raise PackingError(f"sequence {i} is empty")
        channels = {s.shape[1] for s in seqs}
        if len(channels) != 1:
            raise PackingError(f"sequences disagree on channel count: {sorted(channels)}")
        object.__setattr__(self, "sequences", seqs)

    @property
    def channels(self) -> int:
        return self.sequences[0].shape[1]

    @property
    def lengths(self) -> list[int]:
        return [s.shape[0] for s in self.sequences]

    def __len__(self) -> int:
        return len(self.sequences)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.sequences[i]


@dataclass(frozen=True)
class PackPlan:
    """Assignment of sequence ids to fixed-capacity packs, in pack order."""

    capacity: int
    packs: tuple[tuple[int, ...], ...]
    lengths: tuple[int, ...]

    def __post_init__(self):
        packs = tuple(tuple(int(i) for i in p) for p in self.packs)
        lengths = tuple(int(n) for n in self.lengths)
        object.__setattr__(self, "packs", packs)
        object.__setattr__(self, "lengths", lengths)
        if self.capacity < 1:
            raise PackingError(f"capacity must be positive, got {self.capacity}")
        seen = sorted(i for p in packs for i in p)
        if seen != list(range(len(lengths))):
            raise PackingError("every sequence id must appear in exactly one pack, exactly once")
        for k, p in enumerate(packs):
            if not p:
                raise PackingError(f"pack {k} is empty")
            used = sum(lengths[i] for i in p)
            if used > self.capacity:
                raise PackingError(f"pack {k} holds {used} tokens, over capacity {self.capacity}")

    @property
    def num_packs(self) -> int:
        return len(self.packs)

    @property
    def total_slots(self) -> int:
        return self.num_packs * self.capacity

    @property
    def total_tokens(self) -> int:
        return sum(self.lengths)

    def offsets(self) -> dict[int, tuple[int, int]]:
        """Map sequence id to (pack, starting slot)."""
        out = {}
        for k, p in enumerate(self.packs):
            pos = 0
            for i in p:
                out[i] = (k, pos)
                pos += self.lengths[i]
        return out

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "packs": [list(p) for p in self.packs],
            "lengths": list(self.lengths),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PackPlan":
        return cls(capacity=int(d["capacity"]), packs=d["packs"], lengths=d["lengths"])


@dataclass(frozen=True)
class PackedBatch:
    """Packed data ``(num_packs, capacity, channels)`` plus per-slot position indices."""

    data: np.ndarray
    position_indices: np.ndarray
    plan: PackPlan = field(repr=False)

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    def with_data(self, data: np.ndarray) -> "PackedBatch":
        """Same layout, new per-slot payload (channel count may differ)."""
        data = np.asarray(data)
        if data.shape[:2] != self.data.shape[:2]:
            raise PackingError(f"payload shape {data.shape} does not match layout {self.data.shape[:2]}")
        return PackedBatch(data, self.position_indices, self.plan)


def _check_lengths(lengths: Sequence[int], capacity: int) -> list[int]:
    lengths = [int(n) for n in lengths]
    if capacity < 1:
        raise PackingError(f"capacity must be positive, got {capacity}")
    for i, n in enumerate(lengths):
        if n < 1:
            raise PackingError(f"sequence {i} has non-positive length {n}")
        if n > capacity:
            raise PackingError(f"sequence exceeds pack capacity: sequence {i} has length {n} > {capacity}")
    return lengths


def plan_fifo(lengths: Sequence[int], capacity: int) -> PackPlan:
    """Pack in received order, sealing the current pack when the next sequence does not fit."""
    lengths = _check_lengths(lengths, capacity)
    packs: list[list[int]] = []
    room = 0
    for i, n in enumerate(lengths):
        if not packs or n > room:
            packs.append([])
            room = capacity
        packs[-1].append(i)
        room -= n
    return PackPlan(capacity, packs, lengths)


class _MaxTree:
    """Segment tree over bin free space; finds the leftmost bin with enough room."""

    def __init__(self, size: int, capacity: int):
        n = 1
        while n < size:
            n *= 2
        self.n = n
        self.tree = [0] * (2 * n)
        self.capacity = capacity
        self.opened = 0

    def first_fit(self, need: int) -> int:
        if self.tree[1] < need:
            return -1
        node = 1
        while node < self.n:
            node = 2 * node if self.tree[2 * node] >= need else 2 * node + 1
        return node - self.n

    def set(self, leaf: int, value: int) -> None:
        node = leaf + self.n
        self.tree[node] = value
        node //= 2
        while node:
            self.tree[node] = max(self.tree[2 * node], self.tree[2 * node + 1])
            node //= 2


def plan_greedy_sorted(lengths: Sequence[int], capacity: int) -> PackPlan:
    """First-fit-decreasing: longest first (ties by id), each into the earliest pack with room."""
    lengths = _check_lengths(lengths, capacity)
    order = sorted(range(len(lengths)), key=lambda i: (-lengths[i], i))
    tree = _MaxTree(max(len(lengths), 1), capacity)
    free: list[int] = []
    packs: list[list[int]] = []
    for i in order:
        n = lengths[i]
        k = tree.first_fit(n)
        if k < 0:
            k = len(packs)
            packs.append([])
            free.append(capacity)
        packs[k].append(i)
        free[k] -= n
        tree.set(k, free[k])
    return PackPlan(capacity, packs, lengths)


def plan_pad_to_max(lengths: Sequence[int], capacity: int) -> PackPlan:
    """Baseline layout: one sequence per pack, padded to ``capacity``."""
    lengths = _check_lengths(lengths, capacity)
    return PackPlan(capacity, [[i] for i in range(len(lengths))], lengths)


def padding_rate(plan: PackPlan) -> float:
    """Fraction of slots that carry no sequence data."""
    if plan.num_packs == 0:
        raise PackingError("padding rate of an empty plan is undefined")
    slots = plan.total_slots
    return (slots - plan.total_tokens) / slots


def _as_batch(batch) -> SequenceBatch:
    return batch if isinstance(batch, SequenceBatch) else SequenceBatch(tuple(batch))


def pack(batch, plan: PackPlan) -> PackedBatch:
    """Lay sequences out contiguously per pack; trailing slots are zero with index 0."""
    batch = _as_batch(batch)
    if list(plan.lengths) != batch.lengths:
        raise PackingError(f"plan lengths {list(plan.lengths)} do not match batch lengths {batch.lengths}")
    dtype = np.result_type(*batch.sequences)
    data = np.zeros((plan.num_packs, plan.capacity, batch.channels), dtype=dtype)
    idx = np.zeros((plan.num_packs, plan.capacity), dtype=np.int64)
    for k, members in enumerate(plan.packs):
        pos = 0
        for i in members:
            n = plan.lengths[i]
            data[k, pos:pos + n] = batch.sequences[i]
            idx[k, pos:pos + n] = np.arange(n)
            pos += n
    return PackedBatch(data, idx, plan)


def _check_indices(idx: np.ndarray, plan: PackPlan) -> None:
    expected = position_indices_for(plan)
    if idx.shape != expected.shape:
        raise PackingError(f"position_indices shape {idx.shape} does not match plan layout {expected.shape}")
    bad = np.argwhere(idx != expected)
    if bad.size:
        k, s = bad[0]
        raise PackingError(f"corrupted position_indices at pack {k}, slot {s}: "
                           f"found {idx[k, s]}, expected {expected[k, s]}")


def position_indices_for(plan: PackPlan) -> np.ndarray:
    idx = np.zeros((plan.num_packs, plan.capacity), dtype=np.int64)
    for k, members in enumerate(plan.packs):
        pos = 0
        for i in members:
            n = plan.lengths[i]
            idx[k, pos:pos + n] = np.arange(n)
            pos += n
    return idx


def unpack(packed: PackedBatch, data: np.ndarray | None = None) -> SequenceBatch:
    """Inverse of :func:`pack`; returns sequences in original id order.

    ``data`` optionally overrides the payload (e.g. an operator's packed output
    laid out like ``packed``).
    """
    plan = packed.plan
    payload = packed.data if data is None else np.asarray(data)
    if payload.shape[:2] != (plan.num_packs, plan.capacity):
        raise PackingError(f"payload shape {payload.shape} does not match plan layout")
    _check_indices(np.asarray(packed.position_indices), plan)
    out: list[np.ndarray | None] = [None] * len(plan.lengths)
    for i, (k, pos) in plan.offsets().items():
        out[i] = payload[k, pos:pos + plan.lengths[i]].copy()
    return SequenceBatch(tuple(out))


def compute_reverse_indices(position_indices, plan: PackPlan | None = None) -> np.ndarray:
    """Distance from each slot to the last element of its sequence (0 at padding)."""
    idx = np.asarray(position_indices)
    if plan is not None:
        _check_indices(idx, plan)
    cap = idx.shape[-1]
    # a slot ends its sequence when the following slot restarts at index 0
    is_end = np.ones(idx.shape, dtype=bool)
    is_end[..., :-1] = idx[..., 1:] == 0
    pos = np.broadcast_to(np.arange(cap), idx.shape)
    end_at = np.where(is_end, pos, cap)
    end_at = np.minimum.accumulate(end_at[..., ::-1], axis=-1)[..., ::-1]
    return (end_at - pos).astype(np.int64)
