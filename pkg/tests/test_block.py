import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from packmamba.block import (REGISTRY, BlockParams, Operator, OperatorClass, block_operator,
                             conv_operator, dt_rank_for, init_block_params, linear,
                             linear_operator, mamba_block_backward, mamba_block_forward,
                             mamba_block_packed, pui_check, register, rmsnorm, rmsnorm_operator,
                             sigmoid, silu, softplus, ssm_operator, unmasked_conv_operator)
from packmamba.conv import ConvParams
from packmamba.packing import PackPlan, SequenceBatch, pack, plan_fifo, plan_greedy_sorted, unpack
from packmamba.verify import (block_fd_errors, random_batch, random_lengths, random_plan,
                              signal_block_params)

finite = st.floats(-50, 50, allow_nan=False)


# --- pointwise pieces -------------------------------------------------------------------

def test_activation_examples():
    assert sigmoid(0.0) == 0.5
    assert silu(0.0) == 0.0
    assert softplus(0.0) == pytest.approx(np.log(2), rel=1e-15)
    assert np.isfinite(sigmoid(np.array([-1000.0, 1000.0]))).all()


@given(finite)
def test_sigmoid_symmetry(x):
    assert sigmoid(x) + sigmoid(-x) == pytest.approx(1.0, abs=1e-15)


@given(st.floats(-30, 30))
def test_softplus_matches_log1p_exp(x):
    assert softplus(x) == pytest.approx(np.log1p(np.exp(x)), rel=1e-12)


def naive_matmul(x, w):
    out = np.zeros((x.shape[0], w.shape[1]))
    for i in range(x.shape[0]):
        for j in range(w.shape[1]):
            for k in range(w.shape[0]):
                out[i, j] += x[i, k] * w[k, j]
    return out


def test_linear_examples():
    x = np.array([[1.0, -2.0, 0.5]])
    assert np.array_equal(linear(x, np.eye(3), np.zeros(3)), x)
    assert linear(np.array([1.0, 2.0]), np.array([[1.0], [1.0]])).tolist() == [3.0]
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(7, 5)), rng.normal(size=(5, 4))
    assert np.allclose(linear(x, w), naive_matmul(x, w), rtol=1e-6)
    with pytest.raises(ValueError):
        linear(x, rng.normal(size=(4, 4)))
    with pytest.raises(ValueError):
        linear(x, w, np.zeros(5))


def test_rmsnorm_examples():
    y = rmsnorm(np.full((2, 6), 3.0), np.ones(6))
    assert np.allclose(y, 1.0, atol=1e-6)
    assert np.array_equal(rmsnorm(np.zeros((1, 4)), np.ones(4)), np.zeros((1, 4)))


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
def test_rmsnorm_closed_form(v):
    w = np.linspace(0.5, 2.0, len(v))
    denom = (sum(t * t for t in v) / len(v) + 1e-6) ** 0.5
    assert np.allclose(rmsnorm(np.array(v), w), [t / denom * wi for t, wi in zip(v, w)], rtol=1e-12)


@settings(max_examples=50)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8).filter(lambda v: max(map(abs, v)) > 1.0),
       st.floats(1.0, 10))
def test_rmsnorm_scale_invariance(v, c):
    # away from eps the output is invariant to input scale and has unit RMS
    x = np.array(v)
    w = np.ones_like(x)
    assert np.allclose(rmsnorm(c * x, w), rmsnorm(x, w), rtol=1e-5, atol=1e-5)
    assert np.sqrt(np.mean(rmsnorm(x, w) ** 2)) == pytest.approx(1.0, rel=1e-5)


# --- block ------------------------------------------------------------------------------

def test_param_shapes():
    bp = init_block_params(32, 2, 4, 3, seed=1)
    assert (bp.model_dim, bp.expanded_dim, bp.state_dim, bp.conv_width) == (32, 64, 4, 3)
    assert bp.dt_rank == dt_rank_for(32) == 2
    assert np.all(bp.A < 0)
    with pytest.raises(ValueError):
        BlockParams(**{**bp.as_dict(), "out_proj": np.zeros((64, 31))})


def test_init_is_seeded():
    a, b = init_block_params(8, seed=3), init_block_params(8, seed=3)
    assert all(np.array_equal(a.as_dict()[k], b.as_dict()[k]) for k in a.as_dict())


def test_zero_input_gives_zero_output():
    bp = init_block_params(8, 2, 4, 4, seed=0)
    bp = BlockParams(**{**bp.as_dict(), "conv_bias": np.zeros(16), "dt_bias": np.zeros(16)})
    out = mamba_block_packed(np.zeros((2, 10, 8)), bp, np.zeros((2, 10), dtype=int))
    assert not out.any()


def test_full_pack_matches_unpacked_path():
    rng = np.random.default_rng(2)
    bp = signal_block_params(4, 3, 4, seed=2)
    seq = rng.normal(size=(20, 4))
    packed = mamba_block_packed(seq[None], bp, np.arange(20)[None])[0]
    serial = mamba_block_forward(SequenceBatch((seq,)), bp).sequences[0]
    assert np.max(np.abs(packed - serial)) <= 1e-10 * np.max(np.abs(serial))


def test_forward_dispatch():
    rng = np.random.default_rng(3)
    bp = signal_block_params(3, 2, 3, seed=3)
    batch = random_batch(rng, [4, 7, 2], 3)
    packed = pack(batch, plan_fifo([4, 7, 2], 16))
    out = mamba_block_forward(packed, bp)
    assert np.array_equal(out.data, mamba_block_forward(packed.data, bp, packed.position_indices))
    with pytest.raises(ValueError):
        mamba_block_forward(packed.data, bp)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-8)])
def test_block_pui(dtype, tol):
    rng = np.random.default_rng(4)
    for _ in range(10):
        lengths = random_lengths(rng)
        plan = random_plan(rng, lengths, 64)
        ch = int(rng.integers(1, 5))
        bp = signal_block_params(ch, int(rng.integers(1, 5)), int(rng.integers(1, 5)),
                                 int(rng.integers(2 ** 32)), dtype)
        rep = pui_check(block_operator(bp), random_batch(rng, lengths, ch, dtype), plan, tol)
        assert rep.passed, rep


@pytest.mark.parametrize("seed", range(4))
def test_block_backward_matches_finite_differences(seed):
    errs = block_fd_errors(np.random.default_rng(seed))
    assert max(errs.values()) <= 1e-4, errs


def test_block_backward_no_leakage():
    rng = np.random.default_rng(5)
    bp = signal_block_params(3, 2, 4, seed=5)
    lengths = [5, 3, 6]
    plan = plan_fifo(lengths, 16)
    packed = pack(random_batch(rng, lengths, 3), plan)
    dout_seqs = [np.zeros((n, 3)) for n in lengths]
    dout_seqs[1] = rng.normal(size=(3, 3))
    dx, _ = mamba_block_backward(packed.data, bp, packed.position_indices, pack(dout_seqs, plan).data)
    got = unpack(packed, dx).sequences
    assert not got[0].any() and not got[2].any() and got[1].any()


# --- operators and PUI checking ---------------------------------------------------------

def boundary_batch():
    return SequenceBatch((np.array([[1.0], [2.0], [3.0]]), np.array([[4.0], [5.0]])))


def test_element_wise_pui_is_exact():
    rng = np.random.default_rng(6)
    batch = random_batch(rng, [3, 9, 1, 4], 2)
    plan = plan_greedy_sorted(batch.lengths, 12)
    for op in REGISTRY.values():
        rep = pui_check(op, batch, plan, 0.0)
        assert rep.passed and rep.max_abs_dev == 0.0


def test_unmasked_conv_fails_at_second_sequence_start():
    cp = ConvParams(np.array([[1.0, 1.0]]), np.zeros(1))
    plan = PackPlan(8, [[0, 1]], [3, 2])
    rep = pui_check(unmasked_conv_operator(cp), boundary_batch(), plan, 1e-6)
    assert not rep.passed
    assert rep.worst_location == (1, 0, 0)
    assert rep.max_abs_dev == 3.0
    assert pui_check(conv_operator(cp), boundary_batch(), plan, 1e-12).passed


def test_report_serializes():
    cp = ConvParams(np.array([[1.0, 1.0]]), np.zeros(1))
    d = pui_check(unmasked_conv_operator(cp), boundary_batch(), plan_fifo([3, 2], 8), 1e-6).to_dict()
    assert d["passed"] is False and d["worst_location"] == [1, 0, 0]


def test_registry_requires_a_class():
    with pytest.raises(TypeError):
        register(Operator("bogus", "element-wise", lambda x, _: x))
    op = register(Operator("neg", OperatorClass.ELEMENT_WISE, lambda x, _: -x))
    assert REGISTRY.pop("neg") is op


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_pointwise_classes_ignore_neighbours(seed):
    # element-wise and token-wise outputs at a slot depend on that slot alone
    rng = np.random.default_rng(seed)
    ch = int(rng.integers(1, 4))
    x = rng.normal(size=(1, 12, ch))
    idx = np.zeros((1, 12), dtype=int)
    perm = rng.permutation(12)
    ops = [op for op in REGISTRY.values() if op.op_class is OperatorClass.ELEMENT_WISE]
    ops += [linear_operator(rng.normal(size=(ch, 2))), rmsnorm_operator(rng.normal(size=ch))]
    for op in ops:
        assert op.op_class is not OperatorClass.SEQUENCE_WISE
        assert np.array_equal(op(x, idx)[:, perm], op(x[:, perm], idx))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_pui_is_closed_under_composition(seed):
    # each stage satisfies PUI, so the chain does too
    rng = np.random.default_rng(seed)
    ch = int(rng.integers(1, 4))
    cp = ConvParams(rng.normal(size=(ch, 3)), rng.normal(size=ch))
    w = rng.normal(size=(ch, ch))
    stages = [conv_operator(cp), REGISTRY["silu"], linear_operator(w), conv_operator(cp)]

    def fn(x, idx):
        for s in stages:
            x = s(x, idx)
        return x

    def ref(s):
        for op in stages:
            s = op.on_sequence(s)
        return s

    chain = Operator("chain", OperatorClass.SEQUENCE_WISE, fn, ref)
    lengths = random_lengths(rng, 6, 16, 32)
    batch = random_batch(rng, lengths, ch)
    plan = random_plan(rng, lengths, 32)
    for op in stages:
        assert pui_check(op, batch, plan, 1e-12).passed
    assert pui_check(chain, batch, plan, 1e-12).passed


def test_ssm_operator_pui():
    rng = np.random.default_rng(8)
    bp = signal_block_params(2, 3, 4, seed=8)
    lengths = [7, 1, 12, 5]
    batch = random_batch(rng, lengths, bp.expanded_dim)
    rep = pui_check(ssm_operator(bp), batch, plan_greedy_sorted(lengths, 16), 1e-10)
    assert rep.passed, rep
