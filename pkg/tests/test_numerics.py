import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phishkd.exceptions import ContractError, DimensionError, NumericError, ParameterError
from phishkd.numerics import (
    Parameter,
    Tensor,
    activation,
    backward,
    derive_seed,
    grad_check,
    log,
    make_rng,
    matmul,
    no_grad,
    reduce_sum,
    sigmoid,
    softmax,
    softmax_with_temperature,
    tanh,
)
from phishkd.layers import AttentionParams, LstmParams, LstmState, attention_multihead, dense, lstm_cell_forward


def test_matmul_identity():
    out = matmul(np.eye(2), [[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_hand_value():
    assert matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_grads_both_operands():
    a = Parameter(np.arange(6.0).reshape(2, 3))
    b = Parameter(np.arange(12.0).reshape(3, 4) / 10)
    g = backward(reduce_sum(matmul(a, b)), {"a": a, "b": b})
    np.testing.assert_allclose(g["a"], np.ones((2, 4)) @ b.data.T)
    np.testing.assert_allclose(g["b"], a.data.T @ np.ones((2, 4)))


def test_batched_matmul_against_shared_weight():
    rng = np.random.default_rng(0)
    x = Parameter(rng.normal(size=(3, 5, 4)))
    w = Parameter(rng.normal(size=(4, 2)))
    assert grad_check(lambda: reduce_sum(matmul(x, w) * matmul(x, w)), {"x": x, "w": w}).max_rel_error < 1e-6


def test_softmax_uniform_cases():
    np.testing.assert_allclose(softmax_with_temperature([0.0, 0.0], 1.0).data, [0.5, 0.5])
    for tau in (0.1, 1.0, 7.5):
        np.testing.assert_allclose(softmax_with_temperature([3.0] * 4, tau).data, [0.25] * 4)


def test_softmax_temperature_closed_form():
    out = softmax_with_temperature([2.0, 0.0], 2.0).data
    e = math.e
    np.testing.assert_allclose(out, [e / (1 + e), 1 / (1 + e)], rtol=0, atol=1e-15)
    np.testing.assert_allclose(out, [0.73106, 0.26894], atol=5e-6)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_bad_temperature(tau):
    with pytest.raises(ParameterError):
        softmax_with_temperature([1.0, 2.0], tau)


def test_softmax_empty_input():
    with pytest.raises(ParameterError):
        softmax_with_temperature(np.zeros(0), 1.0)


def test_masked_softmax_zeros_masked_entries():
    out = softmax(np.array([[1.0, 2.0, 3.0]]), mask=np.array([[True, False, True]])).data
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out[0, [0, 2]], [1 / (1 + math.e ** 2), 1 / (1 + math.e ** -2)])


def test_activation_values():
    assert activation("sigmoid", 0.0).item() == 0.5
    assert activation("tanh", 0.0).item() == 0.0
    for x in (1.0, 3.0, 10.0):
        assert sigmoid(-x).item() == pytest.approx(1 - sigmoid(x).item(), abs=1e-15)


def test_activation_saturates_without_overflow():
    out = sigmoid(np.array([-1000.0, 1000.0])).data
    assert out.tolist() == [0.0, 1.0]
    assert np.all(np.abs(tanh(np.array([-1e4, 1e4])).data) <= 1)


def test_unknown_activation():
    with pytest.raises(ValueError, match="unknown activation"):
        activation("swish", 1.0)


def test_backward_sum_is_ones():
    p = Parameter(np.random.default_rng(1).normal(size=(3, 2)))
    np.testing.assert_array_equal(backward(reduce_sum(p), {"p": p})["p"], np.ones((3, 2)))


def test_backward_square():
    p = Parameter([1.0, 2.0])
    assert backward(reduce_sum(p * p), {"p": p})["p"].tolist() == [2.0, 4.0]


def test_backward_unreached_parameter_gets_zeros():
    p, q = Parameter([1.0, 2.0]), Parameter(np.ones((2, 3)))
    g = backward(reduce_sum(p), {"p": p, "q": q})
    assert g["q"].shape == (2, 3) and not g["q"].any()


def test_backward_rejects_non_scalar():
    p = Parameter([1.0, 2.0])
    with pytest.raises(ContractError):
        backward(p * 2.0, {"p": p})


def test_shared_subexpression_accumulates():
    p = Parameter([3.0])
    y = p * p
    assert backward(reduce_sum(y + y), {"p": p})["p"].tolist() == [12.0]


def test_no_grad_records_nothing():
    p = Parameter([1.0])
    with no_grad():
        y = p * 2.0
    assert not y.requires_grad


def test_nan_is_surfaced():
    with np.errstate(invalid="ignore"), pytest.raises(NumericError):
        log(Tensor([-1.0]))


def test_float32_stays_float32():
    a = Parameter(np.ones((2, 2), dtype=np.float32))
    out = sigmoid(matmul(a, a) * 2.0 + 1.0)
    assert out.dtype == np.float32


# -- gradient checks ------------------------------------------------------

def test_grad_check_dense_bce():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 4))
    y = np.array([0, 1, 1, 0, 1, 0], dtype=float)
    W, b = Parameter(rng.normal(size=(4, 1))), Parameter([0.1])

    def loss():
        p = sigmoid(dense(x, W, b)).reshape(-1)
        return -reduce_sum(y * log(p) + (1 - y) * log(1 - p)) * (1 / 6)

    assert grad_check(loss, {"W": W, "b": b}).max_rel_error < 1e-5


def test_grad_check_lstm_cell_three_steps():
    rng = make_rng(3, "test")
    p = LstmParams.init(4, 4, rng)
    xs = rng.normal(size=(3, 4))

    def loss():
        state = LstmState.zeros(4)
        for t in range(3):
            state = lstm_cell_forward(xs[t], state, p)
        return reduce_sum(state.h * state.h) + reduce_sum(state.c)

    assert grad_check(loss, p.named("lstm")).max_rel_error < 1e-4


def test_grad_check_multihead_block():
    rng = make_rng(4, "test")
    p = AttentionParams.init(6, 2, 3, rng, out_dim=5)
    h = Parameter(rng.normal(size=(2, 4, 6)))
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], dtype=bool)

    def loss():
        out = attention_multihead(h, p, mask)
        return reduce_sum(out * out)

    assert grad_check(loss, {"h": h, **p.named("attn")}).max_rel_error < 1e-4


def test_grad_check_eps_range():
    p = Parameter([1.0])
    with pytest.raises(ParameterError):
        grad_check(lambda: reduce_sum(p), {"p": p}, eps=1e-2)


# -- properties ---------------------------------------------------------------

magnitudes = st.sampled_from([1e-3, 1e-1, 1.0, 10.0, 1e3])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1, 1)), magnitudes)
def test_softmax_sums_to_one(z, scale):
    assert abs(softmax(z * scale).data.sum() - 1.0) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_matmul_associative(seed, m, k, n, p):
    rng = np.random.default_rng(seed)
    A, B, C = rng.normal(size=(m, k)), rng.normal(size=(k, n)), rng.normal(size=(n, p))
    left = matmul(matmul(A, B), C).data
    right = matmul(A, matmul(B, C)).data
    np.testing.assert_allclose(left, right, rtol=0, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=2, max_size=6, unique=True),
       st.floats(0.2, 5.0), st.floats(1.01, 3.0))
def test_temperature_monotone(ints, tau, factor):
    # logit gaps stay below ~20 so the top probability is not rounded to 1.0
    z = np.array(ints, dtype=float) / 10
    lo, hi = softmax_with_temperature(z, tau).data, softmax_with_temperature(z, tau * factor).data
    assert hi.max() < lo.max()
    assert hi.argmax() == lo.argmax() == z.argmax()


def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(7, "fold", 1) == derive_seed(7, "fold", 1)
    assert derive_seed(7, "fold", 1) != derive_seed(7, "fold", 2)
    a = make_rng(5, "x").random(3)
    np.testing.assert_array_equal(a, make_rng(5, "x").random(3))
