from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fmexpert import checkpoint
from fmexpert import tensor as T
from fmexpert.tensor import Adam, DimensionError, ParamSet, Tensor

from conftest import grad_rel_error, project

FD_TOL = 1e-6
FD_H = 1e-4


def test_matmul_hand_example():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_identity(rng):
    m = rng.normal(size=(3, 3))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)


def test_shape_errors():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))
    with pytest.raises(DimensionError):
        T.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 1))))
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 2, 2)))


def test_trivial_elementwise(rng):
    x = rng.normal(size=(3, 4))
    assert np.array_equal(T.add(Tensor(x), 0.0).data, x)
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_sigmoid_extremes_finite():
    s = T.sigmoid(Tensor([[-1000.0, 1000.0]])).data
    assert np.all(np.isfinite(s)) and s[0, 0] == 0.0 and s[0, 1] == 1.0


def _check(build, shapes, seed=0):
    r = np.random.default_rng(seed)
    ps = ParamSet({f"x{i}": r.normal(size=s) for i, s in enumerate(shapes)})
    errs = grad_rel_error(lambda: project(build(*[ps[f"x{i}"] for i in range(len(shapes))]), seed), ps, eps=FD_H)
    assert max(errs.values()) < FD_TOL, errs


@pytest.mark.parametrize("name,build,shapes", [
    ("matmul", T.matmul, [(3, 4), (4, 2)]),
    ("add_same", T.add, [(3, 4), (3, 4)]),
    ("add_row", T.add, [(3, 4), (1, 4)]),
    ("add_scalar", T.add, [(3, 4), (1, 1)]),
    ("mul_same", T.mul, [(3, 4), (3, 4)]),
    ("mul_row", T.mul, [(3, 4), (1, 4)]),
    ("mul_scalar", T.mul, [(3, 4), (1, 1)]),
    ("scale", lambda a: T.scale(a, -2.5), [(3, 4)]),
    ("sigmoid", T.sigmoid, [(3, 4)]),
    ("silu", T.silu, [(3, 4)]),
    ("layer_norm", T.layer_norm, [(3, 5)]),
    ("concat_cols", lambda a, b: T.concat_cols([a, b]), [(3, 2), (3, 4)]),
    ("take_rows", lambda a: T.take_rows(a, [2, 0, 2, 1]), [(3, 4)]),
    ("sum_all", T.sum_all, [(3, 4)]),
    ("bce", lambda a: T.bce_with_logits(a, (np.arange(12).reshape(3, 4) % 2)), [(3, 4)]),
    ("sub_neg", lambda a, b: -(a - b), [(2, 3), (2, 3)]),
])
def test_op_gradients(name, build, shapes):
    _check(build, shapes)


@pytest.mark.parametrize("hist_len", [[3, 1, 0], [2, 2, 2]])
@pytest.mark.parametrize("M", [0, 1, 3])
def test_attention_gradient(hist_len, M):
    H, d = 3, 4
    B = len(hist_len)
    hv = np.arange(H)[None, :] < np.array(hist_len)[:, None]
    _check(lambda q, k, v: T.sequence_attention(q, k, v, H, hv), [(B * (H + M), d)] * 3, seed=M)


def test_attention_no_history_gradient():
    hv = np.zeros((2, 0), dtype=bool)
    _check(lambda q, k, v: T.sequence_attention(q, k, v, 0, hv), [(4, 3)] * 3)


def test_bce_matches_formula(rng):
    z = rng.normal(size=(4, 3))
    y = (rng.random((4, 3)) < 0.5).astype(float)
    p = 1 / (1 + np.exp(-z))
    want = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert np.allclose(T.bce_with_logits(Tensor(z), y).data, want, rtol=0, atol=1e-14)


def test_gradients_accumulate_across_uses(rng):
    ps = ParamSet({"a": rng.normal(size=(2, 2))})
    a = ps["a"]
    T.sum_all(T.add(a, a)).backward()
    assert np.array_equal(a.grad, np.full((2, 2), 2.0))


def test_adam_first_step_scalar():
    ps = ParamSet({"w": np.zeros((1, 1))})
    Adam(lr=0.1).step(ps, {"w": np.ones((1, 1))})
    assert ps.array("w")[0, 0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_zero_gradients_leave_everything(rng):
    ps = ParamSet({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(1, 3))})
    before = ps.copy()
    touched = Adam().step(ps, {"a": np.zeros((2, 3)), "b": np.zeros((1, 3))})
    assert touched == [] and ps.equal(before) and ps.counters == {"a": 0, "b": 0}


def test_adam_counters_only_touched(rng):
    ps = ParamSet({"head": rng.normal(size=(2, 2)), "body": rng.normal(size=(2, 2))})
    opt = Adam()
    opt.step(ps, {"head": np.ones((2, 2))})
    assert ps.counters == {"head": 1, "body": 0}
    opt.step(ps, {"head": np.ones((2, 2)), "body": np.ones((2, 2))})
    assert ps.counters == {"head": 2, "body": 1}


@settings(max_examples=30, deadline=None)
@given(steps=st.lists(st.sets(st.sampled_from(["a", "b", "c"])), max_size=8))
def test_counter_equals_number_of_touching_steps(steps):
    ps = ParamSet({n: np.zeros((1, 2)) for n in "abc"})
    opt = Adam()
    for s in steps:
        opt.step(ps, {n: np.ones((1, 2)) for n in s})
    for n in "abc":
        assert ps.counters[n] == sum(n in s for s in steps)


@settings(max_examples=40, deadline=None)
@given(a=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)),
                elements=st.floats(-10, 10, allow_nan=False)),
       cols=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_matmul_rows_independent_of_batch(a, cols, seed):
    b = np.random.default_rng(seed).normal(size=(a.shape[1], cols))
    full = T.matmul(Tensor(a), Tensor(b)).data
    for i in range(a.shape[0]):
        assert np.array_equal(T.matmul(Tensor(a[i:i + 1]), Tensor(b)).data[0], full[i])


@settings(max_examples=40, deadline=None)
@given(x=arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)),
                elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_forward_outputs_finite(x):
    t = Tensor(x, requires_grad=True)
    out = T.sum_all(T.add(T.layer_norm(T.silu(t)), T.sigmoid(t)))
    out.backward()
    assert np.all(np.isfinite(out.data)) and np.all(np.isfinite(t.grad))


def test_forward_deterministic(rng):
    x = rng.normal(size=(4, 6))
    w = rng.normal(size=(6, 6))
    f = lambda: T.layer_norm(T.silu(T.matmul(Tensor(x), Tensor(w)))).data
    assert np.array_equal(f(), f())


def test_flop_meter_counts_matmul():
    with T.count_flops() as m:
        T.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((4, 5))))
    assert m.by_op["matmul"] == 2 * 3 * 4 * 5


def test_paramset_duplicate_and_snapshot(rng):
    ps = ParamSet({"a": rng.normal(size=(2, 2))})
    with pytest.raises(KeyError):
        ps.add("a", np.zeros((1, 1)))
    snap = ps.snapshot()
    with pytest.raises(ValueError):
        snap.array("a")[0, 0] = 1.0
    ps.set_array("a", np.zeros((2, 2)))
    assert not np.array_equal(snap.array("a"), ps.array("a"))


def test_checkpoint_roundtrip(rng):
    ps = ParamSet({"enc.x": rng.normal(size=(3, 2)), "head.w": rng.normal(size=(1, 4))}, {"enc.x": 7})
    for tag in (None, "fm-large"):
        back, t = checkpoint.loads(checkpoint.dumps(ps, tag))
        assert t == tag and back.equal(ps) and back.counters == ps.counters
        assert checkpoint.dumps(back, tag) == checkpoint.dumps(ps, tag)


def test_checkpoint_truncated_rejected(rng):
    data = checkpoint.dumps(ParamSet({"a": rng.normal(size=(2, 2))}))
    for cut in (3, 10, len(data) - 1):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(data[:cut])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(data + b"\0")
