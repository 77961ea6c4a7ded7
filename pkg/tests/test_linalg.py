import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dash_grn.errors import ShapeError
from dash_grn.linalg import matmul, pinv_left, pinv_right


def random_matrix(seed, rows, cols, rank=None):
    rng = np.random.default_rng(seed)
    if rank is None:
        return rng.standard_normal((rows, cols))
    return rng.standard_normal((rows, rank)) @ rng.standard_normal((rank, cols))


def test_matmul_identity_and_zero():
    x = random_matrix(0, 3, 4)
    np.testing.assert_array_equal(matmul(np.eye(3), x), x)
    np.testing.assert_array_equal(matmul(x, np.zeros((4, 2))), np.zeros((3, 2)))


def test_matmul_hand_example():
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"2x3.*2x3"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_pinv_identity():
    np.testing.assert_allclose(pinv_left(np.eye(4)), np.eye(4), atol=1e-15)
    np.testing.assert_allclose(pinv_right(np.eye(4)), np.eye(4), atol=1e-15)


def test_pinv_hand_examples():
    # (X^T X)^-1 X^T with X = [2; 1]: X^T X = 5
    np.testing.assert_allclose(pinv_left([[2.0], [1.0]]), [[0.4, 0.2]], atol=1e-15)
    # X^T (X X^T)^-1 with X = [2, 1]
    np.testing.assert_allclose(pinv_right([[2.0, 1.0]]), [[0.4], [0.2]], atol=1e-15)


def test_pinv_matches_normal_equations_full_rank():
    x = random_matrix(1, 9, 4)
    np.testing.assert_allclose(pinv_left(x), np.linalg.solve(x.T @ x, x.T), atol=1e-10)
    y = x.T
    np.testing.assert_allclose(pinv_right(y), y.T @ np.linalg.inv(y @ y.T), atol=1e-10)
    np.testing.assert_allclose(pinv_left(x) @ x, np.eye(4), atol=1e-8)
    np.testing.assert_allclose(y @ pinv_right(y), np.eye(4), atol=1e-8)


def test_rank_deficient_and_zero_inputs():
    x = random_matrix(2, 6, 5, rank=2)
    p = pinv_left(x)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(x @ p @ x, x, atol=1e-8)
    np.testing.assert_array_equal(pinv_left(np.zeros((3, 2))), np.zeros((2, 3)))


def moore_penrose_residuals(x, p):
    return (
        np.abs(x @ p @ x - x).max(),
        np.abs(p @ x @ p - p).max(),
        np.abs((x @ p).T - x @ p).max(),
        np.abs((p @ x).T - p @ x).max(),
    )


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), rows=st.integers(1, 60), cols=st.integers(1, 60), low_rank=st.booleans())
def test_moore_penrose_conditions(seed, rows, cols, low_rank):
    rank = max(1, min(rows, cols) // 2) if low_rank else None
    x = random_matrix(seed, rows, cols, rank)
    for p in (pinv_left(x), pinv_right(x)):
        assert max(moore_penrose_residuals(x, p)) < 1e-8


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), rows=st.integers(1, 40), cols=st.integers(1, 40))
def test_left_is_transpose_of_right(seed, rows, cols):
    x = random_matrix(seed, rows, cols)
    np.testing.assert_allclose(pinv_left(x), pinv_right(x.T).T, atol=1e-10, rtol=0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), dims=st.lists(st.integers(1, 12), min_size=4, max_size=4))
def test_matmul_associative(seed, dims):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.standard_normal((dims[i], dims[i + 1])) for i in range(3))
    np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), atol=1e-10)
