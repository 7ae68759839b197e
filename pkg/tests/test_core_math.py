from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from core_math import (Rng, check_finite, dtype_for, matmul, mat2, rng_normal, rng_permutation, shape_size,
                       solve2, split_sizes, vec2, weighted_inner)
from errors import NonFiniteError, ShapeMismatchError, SingularSystemError


def test_matmul_identity():
    assert np.array_equal(matmul(np.eye(2), np.array([[3.0], [4.0]])), [[3.0], [4.0]])


def test_matmul_hand_arithmetic():
    assert np.array_equal(matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 1))), [[3.0], [7.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng_normal(rng, (8, 8)), rng_normal(rng, (8, 8))
    naive = np.zeros((8, 8))
    for i in range(8):
        for j in range(8):
            for k in range(8):
                naive[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(a, b), naive, rtol=1e-12, atol=1e-12)


def test_matmul_is_associative(rng):
    a, b, c = (rng_normal(rng.child(i), shape) for i, shape in enumerate([(6, 8), (8, 5), (5, 7)]))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    assert np.linalg.norm(left - right) <= 1e-10 * np.linalg.norm(left)


def test_matmul_rejects_inner_mismatch():
    with pytest.raises(ShapeMismatchError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        matmul(np.array([[np.inf]]), np.array([[0.0]]))


def test_solve2_diagonal():
    np.testing.assert_array_equal(solve2(mat2(2, 0, 0, 1), vec2(1, 1)), [0.5, 1.0])


def test_solve2_zero_rhs():
    np.testing.assert_array_equal(solve2(np.eye(2), vec2(0, 0)), [0.0, 0.0])


def test_solve2_ridge_matches_exact_rational_solve():
    ridge = 1e-6
    x = solve2(mat2(1, 1, 1, 1), vec2(1, 1), ridge)
    r = Fraction(ridge)
    a11, a12, a22 = 1 + r, Fraction(1), 1 + r
    det = a11 * a22 - a12 * a12
    expected = [(a22 - a12) / det, (a11 - a12) / det]
    np.testing.assert_allclose(x, [float(v) for v in expected], rtol=1e-8)


def test_solve2_singular():
    with pytest.raises(SingularSystemError):
        solve2(mat2(1, 1, 1, 1), vec2(1, 1))


def test_solve2_negative_ridge():
    with pytest.raises(ValueError):
        solve2(np.eye(2), vec2(1, 1), -1.0)


_entries = st.floats(min_value=-10, max_value=10, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(_entries, _entries, _entries, _entries, _entries, _entries)
def test_solve2_residual_is_small(a11, a12, a21, a22, b1, b2):
    A = mat2(a11, a12, a21, a22)
    det = a11 * a22 - a12 * a21
    assume(abs(det) > 1e-3 * max(1.0, abs(a11 * a22), abs(a12 * a21)))
    x = solve2(A, vec2(b1, b2))
    scale = max(1.0, float(np.abs(A).max()) * float(np.abs(x).max()))
    np.testing.assert_allclose(A @ x, [b1, b2], atol=1e-8 * scale)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, np.pi), st.floats(1.0, 10.0), st.floats(1.0, 10.0), _entries, _entries)
def test_solve2_residual_on_well_conditioned_systems(theta, l1, l2, b1, b2):
    b = vec2(b1, b2)
    assume(np.linalg.norm(b) > 1e-150)
    c, s = np.cos(theta), np.sin(theta)
    q = np.array([[c, -s], [s, c]])
    A = (q * [l1, l2]) @ q.T
    x = solve2(A, b)
    assert np.linalg.norm(A @ x - b) <= 1e-12 * np.linalg.norm(b)


def test_rng_is_deterministic():
    a = rng_normal(Rng(42), (3, 4))
    b = rng_normal(Rng(42), (3, 4))
    assert np.array_equal(a, b)


def test_rng_children_differ_and_repeat():
    parent = Rng(7)
    assert parent.child(0).seed == Rng(7).child(0).seed
    assert parent.child(0).seed != parent.child(1).seed


def test_rng_normal_moments():
    x = rng_normal(Rng(3), (1_000_000,))
    assert abs(x.mean()) < 0.01
    assert abs(x.var() - 1.0) < 0.02


def test_rng_permutation_is_bijection():
    assert sorted(rng_permutation(Rng(0), 5).tolist()) == [0, 1, 2, 3, 4]


def test_check_finite_passes_through():
    x = np.ones(3)
    assert check_finite(x) is x


def test_weighted_inner():
    assert weighted_inner(np.array([1.0, 2.0]), np.array([3.0, 4.0]), np.array([0.5, 2.0])) == 17.5


def test_dtype_for():
    assert dtype_for("f32") == np.float32
    with pytest.raises(ValueError):
        dtype_for("f16")


def test_shape_helpers():
    assert shape_size((2, 3, 4)) == 24
    with pytest.raises(ShapeMismatchError):
        shape_size((2, 0))
    assert split_sizes((2, 3)) == (slice(0, 2), slice(2, 5))
