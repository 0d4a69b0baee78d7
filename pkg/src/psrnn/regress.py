"""Moment accumulation, ridge regression and SVD pseudo-inverse."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyData, NumericalFailure

__all__ = ["MomentAccumulator", "accumulate", "merge", "ridge_solve", "pinv", "regularized_pinv"]


@dataclass
class MomentAccumulator:
    """Running sums over aligned feature tuples ``(x, y, z, u, v)``.

    ``sum3`` is ``sum x (x) y (x) z``, ``sum2`` is ``sum u (x) v`` and ``sum1``
    is ``sum v``. Sums are kept raw; nothing is normalized by ``count``.
    Accumulators built on disjoint data combine with :func:`merge`.
    """

    sum3: np.ndarray | None = None
    sum2: np.ndarray | None = None
    sum1: np.ndarray | None = None
    count: int = 0

    @property
    def dims(self):
        if self.sum3 is None:
            return None
        return self.sum3.shape, self.sum2.shape

    def _ensure(self, shape3, shape2):
        if self.sum3 is None:
            self.sum3 = np.zeros(shape3)
            self.sum2 = np.zeros(shape2)
            self.sum1 = np.zeros(shape2[1])
        elif self.sum3.shape != shape3 or self.sum2.shape != shape2:
            raise DimensionMismatch(
                f"accumulating {shape3}/{shape2} into accumulator of {self.sum3.shape}/{self.sum2.shape}"
            )

    def add(self, x, y, z, u, v) -> "MomentAccumulator":
        x, y, z, u, v = (np.asarray(a, dtype=np.float64) for a in (x, y, z, u, v))
        return self.add_batch(x[None], y[None], z[None], u[None], v[None])

    def add_batch(self, X, Y, Z, U, V) -> "MomentAccumulator":
        """Accumulate row-aligned matrices (one tuple per row)."""
        X, Y, Z, U, V = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (X, Y, Z, U, V))
        n = X.shape[0]
        if any(a.shape[0] != n for a in (Y, Z, U, V)):
            raise DimensionMismatch("feature batches have different row counts")
        self._ensure((X.shape[1], Y.shape[1], Z.shape[1]), (U.shape[1], V.shape[1]))
        if n == 0:
            return self
        self.sum3 += np.einsum("ti,tj,tk->ijk", X, Y, Z, optimize=True)
        self.sum2 += U.T @ V
        self.sum1 += V.sum(axis=0)
        self.count += n
        return self

    def copy(self) -> "MomentAccumulator":
        if self.sum3 is None:
            return MomentAccumulator()
        return MomentAccumulator(self.sum3.copy(), self.sum2.copy(), self.sum1.copy(), self.count)


def accumulate(acc: MomentAccumulator, triple) -> MomentAccumulator:
    """Add one ``(x, y, z, u, v)`` tuple to ``acc`` and return it."""
    return acc.add(*triple)


def merge(a: MomentAccumulator, b: MomentAccumulator) -> MomentAccumulator:
    if a.sum3 is None:
        return b.copy()
    if b.sum3 is None:
        return a.copy()
    if a.dims != b.dims:
        raise DimensionMismatch(f"cannot merge accumulators of dims {a.dims} and {b.dims}")
    return MomentAccumulator(a.sum3 + b.sum3, a.sum2 + b.sum2, a.sum1 + b.sum1, a.count + b.count)


def ridge_solve(X, Y, lam: float) -> np.ndarray:
    """Return ``(X^T X + lam I)^{-1} X^T Y`` computed through the SVD of X.

    At ``lam == 0`` this is the minimum-norm least-squares solution. Exactly
    zero singular values at ``lam == 0`` are handled by a 1e-12 jitter.
    """
    if lam < 0:
        raise ValueError(f"ridge parameter must be non-negative, got {lam}")
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    vector_target = Y.ndim == 1
    if vector_target:
        Y = Y[:, None]
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"ridge_solve got X {X.shape} and Y {Y.shape}")
    if X.shape[0] == 0:
        raise EmptyData("ridge_solve needs at least one row")
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    denom = s**2 + lam
    if np.any(denom <= 0):
        denom = denom + 1e-12
    W = Vt.T @ ((s / denom)[:, None] * (U.T @ Y))
    if not np.all(np.isfinite(W)):
        raise NumericalFailure("ridge solution is not finite")
    return W[:, 0] if vector_target else W


def pinv(M, rcond: float = 1e-10) -> np.ndarray:
    """Moore-Penrose pseudo-inverse; singular values below ``rcond * s_max`` are dropped."""
    if rcond < 0:
        raise ValueError("rcond must be non-negative")
    M = np.asarray(M, dtype=np.float64)
    if M.size == 0:
        return np.zeros(M.shape[::-1])
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s[0] == 0.0:
        return np.zeros(M.shape[::-1])
    inv = np.where(s > rcond * s[0], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    return (Vt.T * inv) @ U.T


def regularized_pinv(M, lam: float = 0.0, rcond: float = 1e-10, rank: int | None = None) -> np.ndarray:
    """Ridge-regularized pseudo-inverse, optionally truncated to ``rank`` components.

    Each kept singular value ``s`` is inverted as ``s / (s^2 + lam)``; at
    ``lam == 0`` this is ``1 / s`` and the result is the Moore-Penrose
    pseudo-inverse of the best rank-``rank`` approximation of ``M``. With
    ``rank=None`` and ``lam > 0`` it equals ``(M^T M + lam I)^{-1} M^T``.
    """
    if lam < 0:
        raise ValueError(f"ridge parameter must be non-negative, got {lam}")
    M = np.asarray(M, dtype=np.float64)
    if rank is None and lam > 0:
        return ridge_solve(M, np.eye(M.shape[0]), lam)
    if M.size == 0:
        return np.zeros(M.shape[::-1])
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s[0] == 0.0:
        return np.zeros(M.shape[::-1])
    keep = s > rcond * s[0] if lam == 0 else s > 0
    if rank is not None:
        keep[rank:] = False
    inv = np.zeros_like(s)
    inv[keep] = s[keep] / (s[keep] ** 2 + lam)
    return (Vt.T * inv) @ U.T
