"""SVD checks against an independent eigenvalue oracle plus factor splitting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slimexit.linalg import SvdResult, svd, truncate_factor


def oracle_singular_values(a):
    """Singular values via symmetric eigendecomposition of the Gram matrix.

    Uses a different algorithm family (tridiagonal QR in LAPACK) than the
    Jacobi implementation under test, so agreement is meaningful.
    """
    a = np.asarray(a, dtype=np.float64)
    gram = a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T
    eig = np.linalg.eigvalsh(gram)
    return np.sqrt(np.clip(eig, 0.0, None))[::-1]


def _assert_valid(res: SvdResult, a, tol=1e-8):
    r = min(a.shape)
    assert res.u.shape == (a.shape[0], r)
    assert res.sigma.shape == (r,)
    assert res.v.shape == (r, a.shape[1])
    assert np.all(res.sigma >= 0)
    assert np.all(np.diff(res.sigma) <= 1e-12)
    np.testing.assert_allclose(res.u.T @ res.u, np.eye(r), atol=tol)
    np.testing.assert_allclose(res.v @ res.v.T, np.eye(r), atol=tol)
    scale = max(np.linalg.norm(a), 1.0)
    assert np.linalg.norm(res.reconstruct() - a) <= tol * scale


def test_diagonal_matrix():
    res = svd(np.diag([3.0, 2.0]))
    np.testing.assert_allclose(res.sigma, [3.0, 2.0], atol=1e-12)
    _assert_valid(res, np.diag([3.0, 2.0]))


def test_rank_one_matrix():
    u = np.array([1.0, 2.0, 2.0])
    v = np.array([3.0, 4.0])
    a = np.outer(u, v)
    res = svd(a)
    np.testing.assert_allclose(res.sigma[0],
                               np.linalg.norm(u) * np.linalg.norm(v),
                               rtol=1e-12)
    np.testing.assert_allclose(res.sigma[1:], 0.0, atol=1e-10)
    _assert_valid(res, a)


@pytest.mark.parametrize("shape", [(1, 1), (1, 7), (7, 1), (4, 4), (8, 5),
                                   (5, 8), (16, 3), (3, 16), (12, 12)])
def test_random_shapes_match_oracle(shape):
    for seed in range(3):
        a = np.random.default_rng(hash(shape) % 2 ** 31 + seed).normal(size=shape)
        res = svd(a)
        _assert_valid(res, a)
        np.testing.assert_allclose(res.sigma, oracle_singular_values(a),
                                   atol=1e-8)


def test_rank_deficient_matrix_keeps_orthonormal_basis():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(6, 2)) @ rng.normal(size=(2, 5))  # rank 2 in 6x5
    res = svd(a)
    _assert_valid(res, a)
    np.testing.assert_allclose(res.sigma[2:], 0.0, atol=1e-8)


def test_sign_convention_is_reproducible():
    a = np.random.default_rng(9).normal(size=(6, 4))
    r1, r2 = svd(a), svd(a)
    np.testing.assert_array_equal(r1.u, r2.u)
    np.testing.assert_array_equal(r1.v, r2.v)
    for k in range(r1.u.shape[1]):
        col = r1.u[:, k]
        first = col[np.abs(col) > 1e-12][0]
        assert first > 0


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        svd(np.array([[1.0, np.nan]]))
    with pytest.raises(ValueError):
        svd(np.ones(3))


def test_truncate_rank_one_exact():
    a = np.outer([1.0, -2.0], [0.5, 1.0, 2.0])
    w1, w2 = truncate_factor(svd(a), 1)
    assert w1.shape == (2, 1) and w2.shape == (1, 3)
    np.testing.assert_allclose(w1 @ w2, a, atol=1e-12)


def test_truncate_identity_drops_one_direction():
    res = svd(np.eye(3))
    w1, w2 = truncate_factor(res, 2)
    err2 = np.linalg.norm(np.eye(3) - w1 @ w2) ** 2
    np.testing.assert_allclose(err2, 1.0, atol=1e-10)


def test_truncate_error_equals_discarded_spectrum():
    a = np.random.default_rng(3).normal(size=(30, 8))
    res = svd(a)
    w1, w2 = truncate_factor(res, 4)
    err2 = np.linalg.norm(a - w1 @ w2, "fro") ** 2
    np.testing.assert_allclose(err2, np.sum(res.sigma[4:] ** 2), atol=1e-8)


def test_truncate_rank_bounds():
    res = svd(np.eye(3))
    with pytest.raises(ValueError):
        truncate_factor(res, 0)
    with pytest.raises(ValueError):
        truncate_factor(res, 4)


@given(m=st.integers(1, 10), n=st.integers(1, 10), seed=st.integers(0, 10 ** 6))
@settings(max_examples=40, deadline=None)
def test_property_valid_decomposition(m, n, seed):
    a = np.random.default_rng(seed).normal(size=(m, n))
    res = svd(a)
    _assert_valid(res, a)
    np.testing.assert_allclose(res.sigma, oracle_singular_values(a), atol=1e-8)


@given(m=st.integers(2, 9), n=st.integers(2, 9), seed=st.integers(0, 10 ** 6),
       data=st.data())
@settings(max_examples=30, deadline=None)
def test_property_eckart_young(m, n, seed, data):
    a = np.random.default_rng(seed).normal(size=(m, n))
    res = svd(a)
    rank = data.draw(st.integers(1, min(m, n)))
    w1, w2 = truncate_factor(res, rank)
    err2 = np.linalg.norm(a - w1 @ w2, "fro") ** 2
    tail = np.sum(res.sigma[rank:] ** 2)
    assert abs(err2 - tail) < 1e-8 * max(np.linalg.norm(a, "fro") ** 2, 1.0)
    if rank == min(m, n):
        np.testing.assert_allclose(w1 @ w2, a, atol=1e-8 * max(1, np.abs(a).max()))
