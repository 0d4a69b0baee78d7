"""Dense 3-mode tensor algebra and CP decomposition.

Tensors are plain ``float64`` numpy arrays with ``ndim == 3``. Modes are
numbered 1, 2, 3 to match the usual tensor-algebra notation, so that
``contract_vec(W, 2, o)`` reads as ``W x_2 o``.

Index convention for a vector contraction along mode 2::

    [W x_2 v]_{i,l} = sum_j W_{i,j,l} v_j

and for a mode-matrix product along mode 3::

    [T x_3 M]_{i,j,l} = sum_k T_{i,j,k} M_{l,k}
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .errors import DimensionMismatch, SingularUpdate

__all__ = [
    "CpFactors",
    "as_tensor3",
    "contract_vec",
    "mode_mat_product",
    "outer3",
    "cp_als",
    "cp_reconstruct",
    "relative_error",
]

_CONTRACT = {1: "jkl,j->kl", 2: "jkl,k->jl", 3: "jkl,l->jk"}
_MODE_PRODUCT = {1: "jkl,mj->mkl", 2: "jkl,mk->jml", 3: "jkl,ml->jkm"}


def as_tensor3(values) -> np.ndarray:
    """Validate and return a finite float64 3-mode array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise DimensionMismatch(f"expected a nonempty 3-mode array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    return arr


def _check_mode(mode: int) -> None:
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode}")


def contract_vec(T: np.ndarray, mode: int, v) -> np.ndarray:
    """Contract ``T`` with vector ``v`` along ``mode``.

    The result is the matrix over the two remaining modes, in their original
    order.
    """
    _check_mode(mode)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != T.shape[mode - 1]:
        raise DimensionMismatch(
            f"vector of length {v.shape} cannot contract mode {mode} of {T.shape}"
        )
    return np.einsum(_CONTRACT[mode], T, v)


def mode_mat_product(T: np.ndarray, mode: int, M) -> np.ndarray:
    """Multiply every mode-``mode`` fiber of ``T`` by ``M`` (shape m x dims[mode])."""
    _check_mode(mode)
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[1] != T.shape[mode - 1]:
        raise DimensionMismatch(
            f"matrix of shape {M.shape} cannot multiply mode {mode} of {T.shape}"
        )
    return np.einsum(_MODE_PRODUCT[mode], T, M)


def outer3(a, b, c) -> np.ndarray:
    a, b, c = (np.atleast_1d(np.asarray(x, dtype=np.float64)) for x in (a, b, c))
    if a.ndim != 1 or b.ndim != 1 or c.ndim != 1 or 0 in (a.size, b.size, c.size):
        raise DimensionMismatch("outer3 takes three nonempty vectors")
    return np.einsum("i,j,k->ijk", a, b, c)


@dataclass(frozen=True)
class CpFactors:
    """Rank-``n`` CP factors; row ``i`` of A, B, C holds the i-th rank-1 term.

    ``history`` holds the relative reconstruction error after each ALS sweep
    when the factors came from :func:`cp_als`.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if not (self.A.ndim == self.B.ndim == self.C.ndim == 2):
            raise DimensionMismatch("CP factors must be matrices")
        if not (self.A.shape[0] == self.B.shape[0] == self.C.shape[0]):
            raise DimensionMismatch(
                f"factor row counts differ: {self.A.shape[0]}, {self.B.shape[0]}, {self.C.shape[0]}"
            )

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.A.shape[1], self.B.shape[1], self.C.shape[1])


def cp_reconstruct(F: CpFactors) -> np.ndarray:
    return np.einsum("ri,rj,rk->ijk", F.A, F.B, F.C)


def relative_error(T: np.ndarray, F: CpFactors) -> float:
    norm = np.linalg.norm(T)
    resid = np.linalg.norm(T - cp_reconstruct(F))
    return float(resid / norm) if norm > 0 else float(resid)


def _solve_gram(rhs: np.ndarray, gram: np.ndarray) -> np.ndarray:
    # rhs: d x n, gram: n x n symmetric PSD; returns rhs @ inv(gram)
    n = gram.shape[0]
    try:
        return np.linalg.solve(gram, rhs.T).T
    except np.linalg.LinAlgError:
        pass
    repaired = gram + 1e-10 * np.eye(n)
    if np.linalg.cond(repaired) > 1e15:
        raise SingularUpdate("ALS normal equations are singular even after 1e-10 ridge repair")
    return np.linalg.solve(repaired, rhs.T).T


def _sweep(T, A, B, C):
    A = _solve_gram(np.einsum("ijk,jr,kr->ir", T, B, C), (B.T @ B) * (C.T @ C))
    B = _solve_gram(np.einsum("ijk,ir,kr->jr", T, A, C), (A.T @ A) * (C.T @ C))
    C = _solve_gram(np.einsum("ijk,ir,jr->kr", T, A, B), (A.T @ A) * (B.T @ B))
    # rebalance column norms so no factor drifts to an extreme scale
    na, nb, nc = (np.linalg.norm(X, axis=0) for X in (A, B, C))
    scale = np.cbrt(na * nb * nc)
    ok = scale > 0
    A[:, ok] *= scale[ok] / na[ok]
    B[:, ok] *= scale[ok] / nb[ok]
    C[:, ok] *= scale[ok] / nc[ok]
    return A, B, C


def _residual(T, A, B, C, norm):
    return float(np.linalg.norm(T - np.einsum("ir,jr,kr->ijk", A, B, C)) / norm)


def _als_run(T, rank, max_iters, tol, rng):
    norm = np.linalg.norm(T)
    A, B, C = (rng.uniform(-1.0, 1.0, size=(d, rank)) for d in T.shape)
    history = []
    prev = np.inf
    for it in range(1, max_iters + 1):
        old = (A, B, C)
        A, B, C = _sweep(T, A.copy(), B.copy(), C.copy())
        err = _residual(T, A, B, C, norm)
        if it > 2:
            # extrapolate along the sweep direction; kept only when it helps,
            # so the recorded error stays non-increasing
            step = it ** (1.0 / 3.0)
            trial = tuple(o + step * (n - o) for o, n in zip(old, (A, B, C)))
            trial_err = _residual(T, *trial, norm)
            if trial_err < err:
                A, B, C = trial
                err = trial_err
        history.append(err)
        if err < tol or prev - err < tol * prev:
            break
        prev = err
    return A, B, C, history


def _joint_polish(T, A, B, C, max_nfev):
    """Trust-region least squares on all factors jointly; escapes ALS swamps."""
    d1, d2, d3 = T.shape
    r = A.shape[1]
    sizes = np.cumsum([d1 * r, d2 * r])

    def unpack(x):
        a, b, c = np.split(x, sizes)
        return a.reshape(d1, r), b.reshape(d2, r), c.reshape(d3, r)

    def resid(x):
        a, b, c = unpack(x)
        return (np.einsum("ir,jr,kr->ijk", a, b, c) - T).ravel()

    def jac(x):
        a, b, c = unpack(x)
        eye1, eye2, eye3 = np.eye(d1), np.eye(d2), np.eye(d3)
        ja = np.einsum("ip,jr,kr->ijkpr", eye1, b, c).reshape(-1, d1 * r)
        jb = np.einsum("ir,jp,kr->ijkpr", a, eye2, c).reshape(-1, d2 * r)
        jc = np.einsum("ir,jr,kp->ijkpr", a, b, eye3).reshape(-1, d3 * r)
        return np.hstack([ja, jb, jc])

    x0 = np.concatenate([A.ravel(), B.ravel(), C.ravel()])
    # "trf" rather than MINPACK "lm": the latter's result depended on heap
    # layout in long runs, which broke bit-for-bit reproducibility
    sol = least_squares(resid, x0, jac=jac, method="trf", xtol=1e-15, ftol=1e-15,
                        gtol=1e-15, max_nfev=max_nfev)
    return unpack(sol.x)


def cp_als(
    T: np.ndarray,
    rank: int,
    max_iters: int = 2000,
    tol: float = 1e-12,
    seed: int = 0,
    restarts: int = 4,
) -> CpFactors:
    """CP decomposition by alternating least squares.

    Factors start i.i.d. uniform on [-1, 1] from ``seed``. Each sweep solves
    the three least-squares subproblems exactly and is followed by an
    extrapolation step that is accepted only if it lowers the error, so the
    error history never increases. A run stops when the relative improvement
    falls below ``tol`` or after ``max_iters`` sweeps. Up to ``restarts``
    further runs, drawn from the same generator, are tried while the best
    relative error exceeds ``1e3 * tol``. If the best run is still above
    that threshold, a trust-region least-squares pass over all three factors
    jointly is tried from it and kept only if it lowers the error.
    """
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    T = as_tensor3(T)
    d1, d2, d3 = T.shape
    if np.linalg.norm(T) == 0.0:
        return CpFactors(np.zeros((rank, d1)), np.zeros((rank, d2)), np.zeros((rank, d3)), (0.0,))

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts + 1):
        A, B, C, history = _als_run(T, rank, max_iters, tol, rng)
        if best is None or history[-1] < best[3][-1]:
            best = (A, B, C, history)
        if best[3][-1] <= 1e3 * tol:
            break
    A, B, C, history = best
    if history[-1] > 1e3 * tol:
        norm = np.linalg.norm(T)
        pA, pB, pC = _joint_polish(T, A, B, C, max_nfev=50 * max_iters)
        polished = _residual(T, pA, pB, pC, norm)
        if polished < history[-1]:
            A, B, C = pA, pB, pC
            history = history + [polished]
    return CpFactors(A.T.copy(), B.T.copy(), C.T.copy(), tuple(history))
