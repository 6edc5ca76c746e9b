import numpy as np
import pytest

from tdlrt.linalg import orthonormal_basis, qr_orthonormal, svd, truncation_rank


def test_qr_identity():
    q, r = qr_orthonormal(np.eye(4))
    np.testing.assert_allclose(q, np.eye(4), atol=1e-15)
    np.testing.assert_allclose(r, np.eye(4), atol=1e-15)


def test_qr_orthonormal_input_fixed_up_to_sign(rng):
    u, _ = np.linalg.qr(rng.standard_normal((7, 3)))
    q, r = qr_orthonormal(u)
    np.testing.assert_allclose(np.abs(q), np.abs(u), atol=1e-12)
    np.testing.assert_allclose(r, np.diag(np.diag(r)), atol=1e-12)
    np.testing.assert_allclose(np.abs(np.diag(r)), 1.0, atol=1e-12)
    assert np.all(np.diag(r) >= 0)


def test_qr_random_contract(rng):
    m = rng.standard_normal((8, 3))
    q, r = qr_orthonormal(m)
    assert np.linalg.norm(q.T @ q - np.eye(3)) < 1e-12
    assert np.linalg.norm(q @ r - m) / np.linalg.norm(m) < 1e-12
    assert np.allclose(np.tril(r, -1), 0) and np.all(np.diag(r) >= 0)


def test_qr_deficient_columns_get_completion(rng):
    a = rng.standard_normal((6, 2))
    m = np.hstack([a, a[:, :1] * 2.0, np.zeros((6, 1))])
    q, r = qr_orthonormal(m)
    assert np.linalg.norm(q.T @ q - np.eye(4)) < 1e-12
    assert np.linalg.norm(q @ r - m) / np.linalg.norm(m) < 1e-12


def test_qr_deterministic(rng):
    m = rng.standard_normal((5, 5))
    m[:, 3] = m[:, 0]
    q1, r1 = qr_orthonormal(m)
    q2, r2 = qr_orthonormal(m.copy())
    assert np.array_equal(q1, q2) and np.array_equal(r1, r2)


def test_qr_rejects_wide():
    with pytest.raises(ValueError):
        qr_orthonormal(np.zeros((2, 3)))


def test_orthonormal_basis_width(rng):
    u, _ = np.linalg.qr(rng.standard_normal((5, 2)))
    g = u @ rng.standard_normal((2, 2))  # already in span(u)
    basis = orthonormal_basis(np.hstack([u, g]), 4)
    assert basis.shape == (5, 4)
    assert np.linalg.norm(basis.T @ basis - np.eye(4)) < 1e-12
    assert np.linalg.norm(basis @ (basis.T @ u) - u) < 1e-12


def test_svd_examples(rng):
    _, s, _ = svd(np.diag([3.0, 1.0]))
    np.testing.assert_allclose(s, [3, 1])
    a, b = rng.standard_normal(4), rng.standard_normal(3)
    _, s, _ = svd(np.outer(a, b))
    assert s[0] == pytest.approx(np.linalg.norm(a) * np.linalg.norm(b), rel=1e-13)
    assert np.all(s[1:] < 1e-13)
    _, s, _ = svd(np.zeros((3, 2)))
    assert not s.any()


def test_svd_contract_and_signs(rng):
    m = rng.standard_normal((6, 4))
    u, s, v = svd(m)
    assert np.linalg.norm(u @ np.diag(s) @ v.T - m) / np.linalg.norm(m) < 1e-11
    assert np.linalg.norm(u.T @ u - np.eye(4)) < 1e-11
    assert np.linalg.norm(v.T @ v - np.eye(4)) < 1e-11
    assert np.all(np.diff(s) <= 0)
    picked = u[np.argmax(np.abs(u), axis=0), np.arange(4)]
    assert np.all(picked >= 0)


def test_truncation_rank_examples():
    assert truncation_rank(np.array([2.0, 1.0, 1e-16]), 0.0, zero_floor=0.0) == 3
    assert truncation_rank(np.array([2.0, 1.0, 1e-16]), 0.0) == 2
    assert truncation_rank(np.array([3.0, 2.0, 1.0]), 10.0) == 1
    assert truncation_rank(np.array([3.0, 2.0, 1.0]), 10.0, r_min=2) == 2
    assert truncation_rank(np.array([1.0, 0.0, 0.0]), 0.0) == 1
    assert truncation_rank(np.array([3.0, 2.0, 1.0]), 1.0) == 2
    assert truncation_rank(np.array([3.0, 2.0, 1.0]), np.sqrt(5.0)) == 1
    with pytest.raises(ValueError):
        truncation_rank(np.array([1.0]), -1.0)


def test_truncation_rank_monotone(rng):
    s = np.sort(rng.random(10))[::-1]
    ranks = [truncation_rank(s, b) for b in np.linspace(0, 3, 40)]
    assert all(a >= b for a, b in zip(ranks, ranks[1:]))
