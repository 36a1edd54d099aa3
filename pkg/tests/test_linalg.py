import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmce.linalg import (
    SingularMatrixError, frobenius_norm_sq, hermitian, matmul, solve_least_squares,
)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]), dtype=complex)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0j
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def crand(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_hermitian_examples():
    assert hermitian([[2 + 3j]])[0, 0] == 2 - 3j
    np.testing.assert_array_equal(hermitian(np.eye(2)), np.eye(2))
    np.testing.assert_array_equal(
        hermitian([[0, 1 + 1j], [2, 0]]), np.array([[0, 2], [1 - 1j, 0]])
    )
    assert hermitian(np.zeros((3, 2))).shape == (2, 3)


def test_matmul_examples():
    rng = np.random.default_rng(0)
    a = crand(rng, 2, 3)
    np.testing.assert_array_equal(matmul(np.eye(2), a), a)
    assert matmul([[1j]], [[1j]])[0, 0] == -1


def test_matmul_dimension_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    for _ in range(100):
        r, k, c = rng.integers(1, 6, size=3)
        a, b = crand(rng, r, k), crand(rng, k, c)
        ref = naive_matmul(a, b)
        err = np.linalg.norm(matmul(a, b) - ref) / np.linalg.norm(ref)
        assert err < 1e-12


def test_solve_examples():
    y = np.array([[1 + 2j, 3], [4j, -1]])
    np.testing.assert_allclose(solve_least_squares(np.eye(2), y), y, atol=1e-15)
    x = solve_least_squares([[1], [1j]], [[1], [1j]])
    np.testing.assert_allclose(x, [[1]], atol=1e-15)


def test_solve_recovers_noiseless_system():
    rng = np.random.default_rng(2)
    h = crand(rng, 4, 2)
    x = crand(rng, 2, 5)
    got = solve_least_squares(h, h @ x)
    assert np.linalg.norm(got - x) / np.linalg.norm(x) < 1e-9


def test_solve_is_least_squares_for_overdetermined_noisy_system():
    rng = np.random.default_rng(3)
    h, y = crand(rng, 6, 3), crand(rng, 6, 2)
    ref = np.linalg.lstsq(h, y, rcond=None)[0]
    np.testing.assert_allclose(solve_least_squares(h, y), ref, rtol=1e-10, atol=1e-12)


def test_solve_batched_matches_loop():
    rng = np.random.default_rng(4)
    h, y = crand(rng, 7, 3, 2), crand(rng, 7, 3, 4)
    batched = solve_least_squares(h, y)
    for b in range(7):
        np.testing.assert_allclose(batched[b], solve_least_squares(h[b], y[b]), rtol=1e-13)


def test_singular_gram_reports_pivot():
    h = np.array([[1, 2], [2, 4], [3, 6]], dtype=complex)  # second column = 2 * first
    with pytest.raises(SingularMatrixError) as info:
        solve_least_squares(h, np.ones((3, 1)))
    assert info.value.pivot == 1


def test_solve_rejects_wide_or_mismatched():
    with pytest.raises(ValueError):
        solve_least_squares(np.ones((2, 3)), np.ones((2, 1)))
    with pytest.raises(ValueError):
        solve_least_squares(np.ones((3, 2)), np.ones((2, 1)))


def test_frobenius_examples():
    assert frobenius_norm_sq(np.zeros((3, 3))) == 0
    assert frobenius_norm_sq([[3], [4j]]) == pytest.approx(25.0, rel=1e-15)
    assert frobenius_norm_sq(np.eye(5)) == 5


def test_non_finite_input_rejected():
    with pytest.raises(ValueError):
        hermitian([[np.nan]])


dims = st.integers(1, 5)


@st.composite
def complex_matrices(draw):
    r, c = draw(dims), draw(dims)
    seed = draw(st.integers(0, 2**32 - 1))
    scale = draw(st.floats(1e-3, 1e3))
    return scale * crand(np.random.default_rng(seed), r, c)


@settings(max_examples=200, deadline=None)
@given(complex_matrices())
def test_hermitian_involution_and_norm_invariance(a):
    np.testing.assert_array_equal(hermitian(hermitian(a)), a)
    assert frobenius_norm_sq(hermitian(a)) == pytest.approx(frobenius_norm_sq(a), rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(0, 3))
def test_solve_recovers_x_when_well_conditioned(seed, n, extra):
    rng = np.random.default_rng(seed)
    h = crand(rng, n + extra, n)
    if np.linalg.cond(h) >= 1e4:
        return
    x = crand(rng, n, 3)
    got = solve_least_squares(h, matmul(h, x))
    assert np.linalg.norm(got - x) / np.linalg.norm(x) < 1e-9
