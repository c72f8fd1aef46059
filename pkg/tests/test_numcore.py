import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lsv import numcore as nc
from lsv.numcore import ParamTensor, RngStream

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_affine_identity_and_hand_cases():
    assert np.array_equal(nc.affine_forward(np.eye(2), np.zeros(2), np.array([[1.0, 2.0]])), [[1, 2]])
    W = np.array([[1.0, 1.0], [0.0, 1.0]])
    assert np.array_equal(nc.affine_forward(W, np.array([1.0, 0.0]), np.array([[1.0, 1.0]])), [[3, 1]])
    X = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(nc.affine_forward(np.zeros((2, 3)), np.array([5.0, 5.0]), X), np.full((4, 2), 5.0))


def test_affine_shape_mismatch():
    with pytest.raises(nc.DimensionError):
        nc.affine_forward(np.eye(2), np.zeros(2), np.ones((1, 3)))
    with pytest.raises(nc.DimensionError):
        nc.affine_forward(np.eye(2), np.zeros(3), np.ones((1, 2)))


def test_relu_cases():
    assert np.array_equal(nc.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    g = nc.relu_backward(np.ones(2), np.array([3.0, -3.0]))
    assert np.array_equal(g, [1, 0])


@given(arrays(np.float64, (5, 3), elements=finite))
def test_relu_idempotent(X):
    assert np.array_equal(nc.relu(nc.relu(X)), nc.relu(X))


def test_batchnorm_hand_case():
    Y, mean, var = nc.batchnorm_forward(np.array([[1.0], [3.0]]))
    assert np.allclose(Y.ravel(), [-1.0, 1.0], atol=1e-6)
    assert mean[0] == 2.0 and var[0] == 1.0


def test_batchnorm_constant_column_and_empty():
    Y, _, _ = nc.batchnorm_forward(np.full((4, 2), 7.0))
    assert np.array_equal(Y, np.zeros((4, 2)))
    with pytest.raises(nc.EmptyBatchError):
        nc.batchnorm_forward(np.zeros((0, 3)))


@given(arrays(np.float64, (6, 4), elements=finite))
def test_batchnorm_zero_mean(X):
    Y, _, _ = nc.batchnorm_forward(X)
    assert np.all(np.abs(Y.mean(axis=0)) < 1e-12)


def test_batchnorm_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    X = ParamTensor("X", rng.normal(size=(5, 3)))
    R = rng.normal(size=(5, 3))

    def loss():
        Y, _, var = nc.batchnorm_forward(X.value)
        X.grad[...] = nc.batchnorm_backward(R, Y, var)
        return float((R * Y).sum())

    assert nc.grad_check(loss, [X]) < 1e-6


def test_softmax_xent_cases():
    loss, _ = nc.softmax_xent(np.zeros((3, 4)), [0, 1, 2])
    assert loss == pytest.approx(math.log(4), abs=1e-12)
    logits = np.zeros((1, 3))
    logits[0, 1] = 50.0
    assert nc.softmax_xent(logits, [1])[0] < 1e-10
    assert nc.softmax_xent(np.array([[1.0, 0.0]]), [0])[0] == pytest.approx(math.log1p(math.exp(-1)), abs=1e-12)


def test_softmax_xent_label_errors():
    with pytest.raises(nc.LabelError):
        nc.softmax_xent(np.zeros((2, 3)), [0, 3])
    with pytest.raises(nc.LabelError):
        nc.softmax_xent(np.zeros((1, 3)), [-1])


@given(arrays(np.float64, (4, 5), elements=finite), st.lists(st.integers(0, 4), min_size=4, max_size=4))
def test_softmax_xent_gradient_rows_sum_to_zero(logits, labels):
    loss, d = nc.softmax_xent(logits, labels)
    assert loss >= 0
    assert np.allclose(d.sum(axis=1), 0.0, atol=1e-12)


def test_grad_check_tiny_network():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(8, 4))
    y = rng.integers(0, 3, 8)
    W1 = ParamTensor("W1", rng.normal(size=(5, 4)))
    b1 = ParamTensor("b1", rng.normal(size=5) * 0.1)
    W2 = ParamTensor("W2", rng.normal(size=(3, 5)))
    b2 = ParamTensor("b2", np.zeros(3))

    def loss():
        z = nc.affine_forward(W1.value, b1.value, X)
        h = nc.relu(z)
        out = nc.affine_forward(W2.value, b2.value, h)
        L, d = nc.softmax_xent(out, y)
        dh, W2.grad[...], b2.grad[...] = nc.affine_backward(d, h, W2.value)
        _, W1.grad[...], b1.grad[...] = nc.affine_backward(nc.relu_backward(dh, z), X, W1.value)
        return L

    assert nc.grad_check(loss, [W1, b1, W2, b2]) < 1e-4


def test_grad_check_zero_params_and_determinism():
    assert nc.grad_check(lambda: 1.0, []) == 0.0
    p = ParamTensor("p", np.ones(2))
    counter = iter(range(100))
    with pytest.raises(nc.DeterminismError):
        nc.grad_check(lambda: float(next(counter)), [p])


def test_grad_check_catches_wrong_gradient():
    p = ParamTensor("p", np.array([1.0, 2.0]))

    def loss():
        p.grad[...] = p.value  # true gradient is 2 * value
        return float((p.value**2).sum())

    assert nc.grad_check(loss, [p]) > 0.4


def test_param_tensor_shapes():
    p = ParamTensor("w", np.zeros((2, 3)))
    assert p.shape == (2, 3) and p.size == 6 and p.grad.shape == (2, 3)
    with pytest.raises(nc.DimensionError):
        ParamTensor("w", np.zeros(2), np.zeros(3))


def test_rng_streams_reproducible_and_independent():
    a, b = RngStream(5, "x"), RngStream(5, "x")
    assert np.array_equal(a.normal(10), b.normal(10))
    assert not np.array_equal(RngStream(5, "x").normal(10), RngStream(5, "y").normal(10))
    assert not np.array_equal(RngStream(5, "x").normal(10), RngStream(6, "x").normal(10))


def test_rng_state_roundtrip():
    r = RngStream(11, "s")
    r.normal(7)
    state = r.get_state()
    first = r.normal(5)
    r2 = RngStream(0, "other")
    r2.set_state(state)
    assert np.array_equal(r2.normal(5), first)


@settings(max_examples=25)
@given(st.integers(1, 50), st.integers(0, 2**63))
def test_rng_choice_distinct(n, seed):
    k = max(1, n // 2)
    picks = RngStream(seed, "c").choice(n, k)
    assert len(set(picks.tolist())) == k and picks.min() >= 0 and picks.max() < n


def test_as_matrix_validation():
    with pytest.raises(nc.DimensionError):
        nc.as_matrix(np.zeros(3))
    with pytest.raises(ValueError):
        nc.as_matrix([[np.nan]])
    assert nc.as_matrix([[1, 2]]).dtype == np.float64


@given(arrays(np.float64, 20, elements=st.floats(-800, 800)))
def test_sigmoid_finite_and_bounded(x):
    s = nc.sigmoid(x)
    assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))
