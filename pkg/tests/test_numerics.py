import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from minikv.numerics import DataError, ShapeError, matmul, softmax_row
from minikv.oracles import matmul_loops


def test_identity_product():
    m = np.array([[1.5, -2.0], [0.25, 3.0]], dtype=np.float32)
    eye = np.eye(2, dtype=np.float32)
    assert np.array_equal(matmul(eye, m), m)
    assert np.array_equal(matmul(m, eye), m)


def test_hand_product():
    out = matmul([[1, 2], [3, 4]], [[1], [1]])
    assert out.tolist() == [[3.0], [7.0]]


def test_matches_triple_loop_exactly(rng):
    a = rng.standard_normal((7, 5)).astype(np.float32)
    b = rng.standard_normal((5, 3)).astype(np.float32)
    assert np.array_equal(matmul(a, b), matmul_loops(a, b))


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_uniform():
    np.testing.assert_allclose(softmax_row([0, 0, 0]), [1 / 3] * 3, atol=1e-7)


def test_softmax_large_logits():
    out = softmax_row([1000.0, 0.0])
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-7)


def test_softmax_against_exp_sum():
    x = np.array([1.0, 2.0, 3.0])
    expected = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(softmax_row(x), expected, atol=1e-7)


def test_softmax_errors():
    with pytest.raises(ShapeError):
        softmax_row([])
    with pytest.raises(DataError):
        softmax_row([0.0, np.nan])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.integers(1, 64), elements=st.floats(-1e4, 1e4, width=32)))
def test_softmax_sums_to_one(x):
    out = softmax_row(x)
    assert abs(float(out.sum()) - 1.0) <= 1e-6
    assert np.all(out >= 0) and np.all(out <= 1)
