import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import gradient_cases
from protorecon import autograd as ag
from protorecon.autograd import Adam, AdamState, NumericError, Tape, Tensor, adam_step, lr_at


@pytest.mark.parametrize("name", sorted(gradient_cases.ALL_CASES))
def test_gradcheck(name):
    assert gradient_cases.worst_error(name) < 1e-4


def test_ops_outside_tape_record_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with ag.no_grad():
            ag.mul(x, 2.0)
        assert tape.nodes == []
        ag.mul(x, 2.0)
    assert len(tape.nodes) == 1


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ag.mul(x, 2.0)
    with pytest.raises(ValueError):
        ag.backward(y, tape)


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = ag.sum_(ag.add(ag.mul(x, x), x))
    ag.backward(y, tape)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_unreached_leaf_gets_zero_grad():
    x = Tensor(np.ones(2), requires_grad=True)
    z = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        ag.mul(z, 3.0)
        y = ag.sum_(x)
    ag.backward(y, tape)
    np.testing.assert_array_equal(z.grad, np.zeros(2))


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_gather_out_of_range():
    with pytest.raises(ValueError):
        ag.gather(Tensor(np.ones((3, 2))), np.array([0, 3]))


def test_softmax_bad_axis_and_nonfinite():
    with pytest.raises(ValueError):
        ag.softmax(Tensor(np.ones((2, 2))), axis=2)
    with pytest.raises(NumericError):
        ag.softmax(Tensor(np.array([1.0, np.inf])))


def test_softmax_large_logits_stable():
    out = ag.softmax(Tensor(np.array([1000.0, 1000.0, -1000.0]))).data
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0])


def test_cross_entropy_examples():
    assert ag.cross_entropy(Tensor(np.zeros(4)), 2).item() == pytest.approx(math.log(4))
    with pytest.raises(ValueError):
        ag.cross_entropy(Tensor(np.zeros(4)), 4)
    with pytest.raises(NumericError):
        ag.cross_entropy(Tensor(np.array([0.0, np.nan])), 0)


def test_sigmoid_extremes_finite():
    out = ag.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])
    assert np.all(np.isfinite(out))


def test_cosine_zero_vector_is_zero_with_zero_grad():
    a = Tensor(np.zeros(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        c = ag.cosine_similarity(a, b)
    ag.backward(c, tape)
    assert c.item() == 0.0
    np.testing.assert_array_equal(a.grad, 0.0)


def test_dropout_identity_in_eval():
    x = Tensor(np.arange(6.0))
    assert ag.dropout(x, 0.5, np.random.default_rng(0), training=False) is x
    assert ag.dropout(x, 0.0, np.random.default_rng(0)) is x


def test_dropout_preserves_expectation():
    x = Tensor(np.ones(200_000))
    y = ag.dropout(x, 0.25, np.random.default_rng(1)).data
    assert abs(y.mean() - 1.0) < 0.01
    assert set(np.unique(y)) <= {0.0, 1 / 0.75}


# ------------------------------------------------------------------ Adam


def _reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * wd * theta
        theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    st_ = AdamState(np.zeros(2), np.zeros(2))
    adam_step(p, np.array([0.5, -3.0]), st_, 0.1)
    # bias-corrected first step is lr * sign(g) up to epsilon
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.floats(0.0, 0.1))
@settings(max_examples=50, deadline=None)
def test_adam_matches_scalar_reference(grads, wd):
    p = Tensor(np.array([0.7]), requires_grad=True)
    state = AdamState(np.zeros(1), np.zeros(1), weight_decay=wd)
    for g in grads:
        adam_step(p, np.array([g]), state, 0.01)
    assert p.data[0] == pytest.approx(_reference_adam(0.7, grads, 0.01, wd=wd), rel=1e-12, abs=1e-12)


def test_adam_zero_lr_leaves_params():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.array([1.0, 1.0])
    opt.step(0.0)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert opt.states[0].t == 1


def test_adam_errors():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        adam_step(p, np.ones(3), AdamState(np.zeros(2), np.zeros(2)), 0.1)
    with pytest.raises(ValueError):
        adam_step(p, np.ones(2), AdamState(np.zeros(2), np.zeros(2)), -0.1)


def test_lr_warmup():
    assert lr_at(0, 1.0, 4) == 0.25
    assert lr_at(3, 1.0, 4) == 1.0
    assert lr_at(10, 1.0, 4) == 1.0
    assert lr_at(0, 1.0, 0) == 1.0
    with pytest.raises(ValueError):
        lr_at(0, 1.0, -1)


# -------------------------------------------------------------- properties


small = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-10, 10))


@given(small)
@settings(max_examples=60, deadline=None)
def test_softmax_rows_sum_to_one(x):
    s = ag.softmax(Tensor(x)).data
    np.testing.assert_allclose(s.sum(-1), 1.0, rtol=1e-12)
    assert np.all(s >= 0)


@given(small)
@settings(max_examples=60, deadline=None)
def test_broadcast_add_grad_shapes(x):
    a = Tensor(x, requires_grad=True)
    b = Tensor(np.ones(x.shape[1]), requires_grad=True)
    with Tape() as tape:
        y = ag.sum_(ag.add(a, b))
    ag.backward(y, tape)
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    np.testing.assert_array_equal(b.grad, np.full(x.shape[1], x.shape[0]))


@given(small, small)
@settings(max_examples=60, deadline=None)
def test_cosine_bounded(a, b):
    if a.shape != b.shape:
        return
    c = ag.cosine_similarity(Tensor(a), Tensor(b)).data
    assert np.all(np.abs(c) <= 1 + 1e-12)
