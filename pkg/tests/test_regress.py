import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psrnn.errors import DimensionMismatch, EmptyData
from psrnn.regress import MomentAccumulator, accumulate, merge, pinv, regularized_pinv, ridge_solve
from psrnn.tensor import outer3
from psrnn.twostage import estimate_q1


def random_rows(rng, n):
    return tuple(rng.normal(size=(n, d)) for d in (3, 2, 4, 4, 3))


def test_empty_accumulator_fails_downstream():
    with pytest.raises(EmptyData):
        estimate_q1(MomentAccumulator())


def test_single_one_hot_triple():
    e = np.eye(3)
    acc = accumulate(MomentAccumulator(), (e[0], e[1], e[2], e[2], e[0]))
    assert np.array_equal(acc.sum3, outer3(e[0], e[1], e[2]))
    assert acc.count == 1


def test_order_independence(rng):
    rows = random_rows(rng, 50)
    perm = rng.permutation(50)
    a = MomentAccumulator().add_batch(*rows)
    b = MomentAccumulator()
    for i in perm:
        b.add(*(r[i] for r in rows))
    assert np.allclose(a.sum3, b.sum3, rtol=1e-9, atol=0)
    assert np.allclose(a.sum2, b.sum2, rtol=1e-9, atol=0)
    assert a.count == b.count == 50


def test_merge_matches_single_pass_and_is_associative(rng):
    rows = random_rows(rng, 60)
    parts = [MomentAccumulator().add_batch(*(r[s] for r in rows)) for s in (slice(0, 20), slice(20, 45), slice(45, 60))]
    whole = MomentAccumulator().add_batch(*rows)
    left = merge(merge(parts[0], parts[1]), parts[2])
    right = merge(parts[0], merge(parts[1], parts[2]))
    for m in (left, right):
        assert np.allclose(m.sum3, whole.sum3, rtol=1e-9, atol=1e-12)
        assert m.count == 60
    assert merge(MomentAccumulator(), parts[0]).count == 20


def test_dimension_mismatch(rng):
    acc = MomentAccumulator().add_batch(*random_rows(rng, 3))
    with pytest.raises(DimensionMismatch):
        acc.add(np.ones(2), np.ones(2), np.ones(4), np.ones(4), np.ones(3))
    other = MomentAccumulator().add(np.ones(1), np.ones(1), np.ones(1), np.ones(1), np.ones(1))
    with pytest.raises(DimensionMismatch):
        merge(acc, other)


def test_ridge_examples(rng):
    assert np.allclose(ridge_solve(np.eye(2), np.eye(2), 1.0), 0.5 * np.eye(2), atol=1e-15)
    X = rng.normal(size=(4, 4)) + 4 * np.eye(4)
    Y = rng.normal(size=(4, 2))
    assert np.allclose(ridge_solve(X, Y, 0.0), np.linalg.inv(X) @ Y, atol=1e-10)
    with pytest.raises(ValueError):
        ridge_solve(X, Y, -1.0)
    with pytest.raises(DimensionMismatch):
        ridge_solve(X, Y[:3], 0.1)


def test_ridge_is_a_minimizer(rng):
    X, Y = rng.normal(size=(20, 5)), rng.normal(size=(20, 2))
    lam = 0.7
    W = ridge_solve(X, Y, lam)

    def objective(V):
        return np.sum((X @ V - Y) ** 2) + lam * np.sum(V**2)

    base = objective(W)
    for _ in range(50):
        d = rng.normal(size=W.shape)
        assert objective(W + 1e-3 * d / np.linalg.norm(d)) >= base


def test_pinv_examples(rng):
    assert np.array_equal(pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]))
    Q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    assert np.allclose(pinv(Q), Q.T, atol=1e-12)
    M = rng.normal(size=(5, 3))
    assert np.allclose(M @ pinv(M) @ M, M, atol=1e-9)
    assert not pinv(np.zeros((2, 3))).any()


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 50), st.integers(1, 50), st.integers(0, 2**32 - 1))
def test_penrose_identities(n, m, seed):
    M = np.random.default_rng(seed).normal(size=(n, m))
    P = pinv(M)
    assert np.allclose(M @ P @ M, M, atol=1e-8)
    assert np.allclose(P @ M @ P, P, atol=1e-8)
    assert np.allclose((M @ P).T, M @ P, atol=1e-8)
    assert np.allclose((P @ M).T, P @ M, atol=1e-8)


def test_regularized_pinv_modes(rng):
    M = rng.normal(size=(4, 4))
    assert np.allclose(regularized_pinv(M, 0.0), pinv(M), atol=1e-10)
    lam = 0.3
    assert np.allclose(regularized_pinv(M, lam), np.linalg.solve(M.T @ M + lam * np.eye(4), M.T), atol=1e-10)
    U, s, Vt = np.linalg.svd(M)
    low = (U[:, :2] * s[:2]) @ Vt[:2]
    assert np.allclose(regularized_pinv(M, 0.0, rank=2), pinv(low), atol=1e-10)
