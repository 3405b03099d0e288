import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from packmamba.packing import pack, plan_greedy_sorted
from packmamba.serialize import (packed_from_dict, packed_to_dict, plan_from_json, plan_to_json,
                                 read_tensor, write_tensor)


def test_plan_json_round_trip():
    plan = plan_greedy_sorted([5, 4, 3, 2, 1, 1], 8)
    text = plan_to_json(plan)
    assert json.loads(text) == {"capacity": 8, "packs": [[0, 2], [1, 3, 4, 5]], "lengths": [5, 4, 3, 2, 1, 1]}
    assert plan_from_json(text) == plan


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_packed_round_trip(dtype):
    rng = np.random.default_rng(0)
    seqs = [rng.normal(size=(n, 2)).astype(dtype) for n in (3, 6, 2)]
    packed = pack(seqs, plan_greedy_sorted([3, 6, 2], 8))
    back = packed_from_dict(json.loads(json.dumps(packed_to_dict(packed))))
    assert back.data.dtype == dtype
    assert back.data.tobytes() == packed.data.tobytes()
    assert np.array_equal(back.position_indices, packed.position_indices)


def test_packed_rejects_bad_indices():
    packed = pack([np.ones((3, 1))], plan_greedy_sorted([3], 4))
    d = packed_to_dict(packed)
    d["position_indices"][0][1] = 2
    with pytest.raises(ValueError):
        packed_from_dict(d)


def test_tensor_header_layout(tmp_path):
    path = tmp_path / "t.bin"
    write_tensor(path, np.arange(6, dtype=np.float32).reshape(2, 3))
    raw = path.read_bytes()
    assert struct.unpack_from("<3Q", raw) == (2, 2, 3)
    assert np.frombuffer(raw[24:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64]),
                  hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=5)))
def test_tensor_round_trip(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("t") / "x.bin"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_tensor_rejects_ints(tmp_path):
    with pytest.raises(TypeError):
        write_tensor(tmp_path / "x.bin", np.arange(3))
