import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vitsmall import tensor as T
from vitsmall.optim import Adam, Schedule, clip_grad_norm, scaled_lr, warmup_cosine
from vitsmall.rng import RngState, stream
from vitsmall.tensor import ParameterError

from oracles import adam_reference


def test_adam_zero_grad_no_decay_is_noop():
    p = T.parameter(np.array([1.0, -2.0]))
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


@pytest.mark.parametrize("g", [0.3, -1.7, 1e-3])
def test_adam_matches_scalar_reference(g):
    p = T.parameter(np.array([0.5]))
    opt = Adam({"p": p}, lr=0.01)
    traj = []
    for _ in range(3):
        p.grad = np.array([g])
        opt.step()
        traj.append(float(p.data[0]))
    ref = adam_reference(0.5, [g] * 3, 0.01)
    assert max(abs(a - b) for a, b in zip(traj, ref)) <= 1e-7


def test_adam_reference_with_decay_and_varying_grads():
    grads = [0.2, -0.5, 1.0, 0.0, 0.3]
    p = T.parameter(np.array([1.2]))
    opt = Adam({"p": p}, lr=0.002, weight_decay=0.05)
    out = []
    for g in grads:
        p.grad = np.array([g])
        opt.step()
        out.append(float(p.data[0]))
    ref = adam_reference(1.2, grads, 0.002, wd=0.05)
    assert max(abs(a - b) for a, b in zip(out, ref)) <= 1e-7


def test_decoupled_weight_decay_example():
    p = T.parameter(np.array([3.0, -1.0]))
    opt = Adam({"p": p}, lr=0.002, weight_decay=5e-2)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_allclose(p.data, np.array([3.0, -1.0]) * (1 - 1e-4), rtol=1e-15)


def test_no_decay_names_are_skipped():
    a, b = T.parameter(np.ones(2)), T.parameter(np.ones(2))
    opt = Adam({"a": a, "b": b}, lr=0.1, weight_decay=0.5, no_decay={"b"})
    opt.step()
    np.testing.assert_allclose(a.data, 0.95)
    np.testing.assert_array_equal(b.data, 1.0)


def test_adam_state_alignment_and_step_count():
    p = T.parameter(np.ones((2, 3)))
    opt = Adam({"w": p}, lr=0.1)
    for i in range(4):
        p.grad = np.ones((2, 3))
        opt.step()
        assert opt.state.step == i + 1
    assert opt.state.m["w"].shape == p.shape == opt.state.v["w"].shape


def test_adam_nan_grad_names_parameter():
    p = T.parameter(np.ones(2))
    opt = Adam({"blocks.0.attn.qkv.weight": p}, lr=0.1)
    p.grad = np.array([1.0, np.nan])
    with pytest.raises(FloatingPointError, match="blocks.0.attn.qkv.weight"):
        opt.step()


def test_adam_rejects_bad_lr():
    with pytest.raises(ParameterError):
        Adam({}, lr=0.0)


def test_adam_bit_reproducible():
    def run():
        rng = stream(3, "adam")
        w = T.parameter(rng.standard_normal((4, 4)))
        opt = Adam({"w": w}, lr=0.01, weight_decay=0.01)
        x = rng.standard_normal((8, 4))
        for _ in range(10):
            loss = T.mean(T.square(T.matmul(T.Tensor(x), w)))
            T.backward(loss)
            opt.step()
            opt.zero_grad()
        return w.data.copy()
    assert np.array_equal(run(), run())


def test_clip_grad_norm():
    a, b = T.parameter(np.zeros(2)), T.parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    total = clip_grad_norm([a, b], 1.0)
    assert total == 5.0
    assert abs(math.hypot(*a.grad, *b.grad) - 1.0) < 1e-6


def test_scaled_lr_rule():
    assert scaled_lr(256) == 0.0005
    assert scaled_lr(512) == 0.001
    assert scaled_lr(64) == 0.000125


def test_schedule_examples():
    s = warmup_cosine(scaled_lr(256), total_steps=100, warmup_steps=10)
    assert s.value(0) == 0.0
    assert s.value(10) == 0.0005
    assert s.value(100) == 1e-6
    with pytest.raises(ParameterError):
        s.value(101)
    with pytest.raises(ParameterError):
        s.value(-1)


def test_schedule_kinds():
    assert Schedule("constant", peak=0.3, total_steps=5).value(4) == 0.3
    lw = Schedule("linear-warmup", start=0.0, peak=1.0, warmup_steps=4, total_steps=10)
    assert lw.value(2) == 0.5 and lw.value(9) == 1.0
    cos = Schedule("cosine", peak=1.0, final=0.0, total_steps=10)
    assert cos.value(0) == 1.0 and abs(cos.value(5) - 0.5) < 1e-12 and cos.value(10) == 0.0
    with pytest.raises(ParameterError):
        Schedule("step")
    with pytest.raises(ParameterError):
        Schedule("linear-warmup", warmup_steps=5, total_steps=3)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 50), st.integers(0, 200), st.floats(1e-5, 1.0), st.floats(0.0, 1e-5))
def test_schedule_continuity_and_monotone_cosine(warm, extra, peak, final):
    total = warm + extra + 1
    s = warmup_cosine(peak, total, warm, final=final)
    assert abs(s.value(warm) - s.value(warm - 1)) <= peak / warm + 1e-15
    vals = [s.value(t) for t in range(warm, total + 1)]
    assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))
    assert vals[0] == peak and vals[-1] == final


def test_rng_streams_are_independent_of_order():
    a1 = stream(5, "views", 0, 17).random(4)
    stream(5, "other").random(100)
    a2 = stream(5, "views", 0, 17).random(4)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, stream(5, "views", 0, 18).random(4))
    assert not np.array_equal(a1, stream(6, "views", 0, 17).random(4))
    assert np.array_equal(RngState(5).child("views", 0).child(17).generator().random(4), a1)


def test_rng_known_values_are_stable():
    # frozen draws guard against silent changes to the stream derivation
    got = stream(0, "init").integers(0, 2**31, size=3)
    assert got.tolist() == [27892008, 769378471, 2111927342]
    assert isinstance(stream(0).bit_generator, np.random.Philox)


def test_rng_rejects_negative_keys():
    with pytest.raises(ValueError):
        stream(0, -1)
