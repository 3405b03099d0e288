"""JSON and raw-binary forms of plans, packed batches, and tensors.

Plan JSON::

    {"capacity": 8, "packs": [[0, 1], [2]], "lengths": [3, 2, 6]}

Packed batch JSON adds ``dtype``, ``position_indices`` (packs x capacity ints) and
``data`` (packs x capacity x channels floats) next to ``plan``.

Binary tensor dump, little-endian throughout: one uint64 holding the number of
dimensions ``n``, then ``n`` uint64 dimension sizes, then the row-major payload as
float32 or float64. The element width is implied by the payload byte count.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .packing import PackedBatch, PackPlan, _check_indices


def plan_to_json(plan: PackPlan) -> str:
    return json.dumps(plan.to_dict())


def plan_from_json(text: str) -> PackPlan:
    return PackPlan.from_dict(json.loads(text))


def packed_to_dict(packed: PackedBatch) -> dict:
    return {
        "plan": packed.plan.to_dict(),
        "dtype": str(packed.data.dtype),
        "position_indices": packed.position_indices.tolist(),
        "data": packed.data.tolist(),
    }


def packed_from_dict(d: dict) -> PackedBatch:
    plan = PackPlan.from_dict(d["plan"])
    data = np.asarray(d["data"], dtype=d.get("dtype", "float64"))
    idx = np.asarray(d["position_indices"], dtype=np.int64)
    _check_indices(idx, plan)
    if data.shape[:2] != idx.shape:
        raise ValueError(f"data shape {data.shape} does not match index layout {idx.shape}")
    return PackedBatch(data, idx, plan)


def write_tensor(path: str | Path, array) -> None:
    arr = np.asarray(array)
    if arr.dtype not in (np.float32, np.float64):
        raise TypeError(f"only float32/float64 tensors can be dumped, got {arr.dtype}")
    header = struct.pack(f"<Q{arr.ndim}Q", arr.ndim, *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (ndim,) = struct.unpack_from("<Q", raw, 0)
    dims = struct.unpack_from(f"<{ndim}Q", raw, 8)
    body = raw[8 * (ndim + 1):]
    count = int(np.prod(dims, dtype=np.int64))
    if count == 0:
        return np.zeros(dims, dtype=np.float64)
    width, rem = divmod(len(body), count)
    if rem or width not in (4, 8):
        raise ValueError(f"{path}: payload of {len(body)} bytes does not fit dims {dims}")
    dtype = np.dtype("<f4") if width == 4 else np.dtype("<f8")
    return np.frombuffer(body, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
