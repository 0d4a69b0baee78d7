"""Feature construction for history, observation and future streams.

Discrete streams are encoded as stacked indicator vectors. Continuous
streams go through random Fourier features for a Gaussian kernel followed by
a centered SVD projection.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .errors import DegenerateSample, DimensionMismatch, RankDeficient, SequenceTooShort

__all__ = [
    "RffMap",
    "WindowSpec",
    "Projection",
    "Triples",
    "OneHotEncoder",
    "RffEncoder",
    "LinearEncoder",
    "fit_bandwidth",
    "sample_rff",
    "apply_rff",
    "fit_projection",
    "augment_constant",
    "window_starts",
    "build_triples",
]


def fit_bandwidth(points, max_points: int = 2000, seed: int = 0) -> float:
    """Median pairwise Euclidean distance over a seeded subsample."""
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise DegenerateSample("need at least two points for the median heuristic")
    if X.shape[0] > max_points:
        rng = np.random.default_rng(seed)
        X = X[np.sort(rng.choice(X.shape[0], size=max_points, replace=False))]
    sigma = float(np.median(pdist(X)))
    if sigma <= 0.0:
        raise DegenerateSample("median pairwise distance is zero; pass a bandwidth explicitly")
    return sigma


@dataclass(frozen=True)
class RffMap:
    """Random Fourier features approximating ``exp(-|x - y|^2 / (2 sigma^2))``."""

    frequencies: np.ndarray  # D x d_in
    phases: np.ndarray  # D
    bandwidth: float

    @property
    def n_features(self) -> int:
        return self.frequencies.shape[0]

    @property
    def input_dim(self) -> int:
        return self.frequencies.shape[1]

    @property
    def scale(self) -> float:
        return float(np.sqrt(2.0 / self.n_features))

    def __call__(self, x) -> np.ndarray:
        return apply_rff(self, x)


def sample_rff(d_in: int, n_features: int, bandwidth: float, seed: int = 0) -> RffMap:
    if n_features < 1:
        raise ValueError("need at least one random feature")
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    rng = np.random.default_rng(seed)
    freqs = rng.normal(0.0, 1.0 / bandwidth, size=(n_features, d_in))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_features)
    return RffMap(freqs, phases, float(bandwidth))


def apply_rff(m: RffMap, x) -> np.ndarray:
    """Map a vector (or the rows of a matrix) to ``scale * cos(F x + phase)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.input_dim:
        raise DimensionMismatch(f"RFF map expects inputs of dim {m.input_dim}, got {x.shape[-1]}")
    return m.scale * np.cos(x @ m.frequencies.T + m.phases)


@dataclass(frozen=True)
class WindowSpec:
    past_len: int = 1
    future_len: int = 1

    def __post_init__(self):
        if self.past_len < 1 or self.future_len < 1:
            raise ValueError("window lengths must be >= 1")


@dataclass(frozen=True)
class Projection:
    """Centered linear projection ``x -> basis @ (x - mean)``."""

    basis: np.ndarray  # d_out x D, orthonormal rows
    mean: np.ndarray  # D
    explained: float = 1.0

    @property
    def out_dim(self) -> int:
        return self.basis.shape[0]

    def __call__(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.basis.T


def fit_projection(features, d_out: int) -> Projection:
    """Top ``d_out`` right-singular directions of the centered feature matrix.

    ``explained`` is the fraction of centered squared mass that the kept
    directions capture. Emits :class:`RankDeficient` when the ``d_out``-th
    singular value is below 1e-12.
    """
    F = np.asarray(features, dtype=np.float64)
    n, D = F.shape
    if d_out < 1 or d_out > min(n, D):
        raise ValueError(f"d_out={d_out} must lie in [1, min(n_samples, dim)={min(n, D)}]")
    mean = F.mean(axis=0)
    _, s, Vt = np.linalg.svd(F - mean, full_matrices=False)
    if s[d_out - 1] < 1e-12:
        warnings.warn(
            f"projection to {d_out} dims keeps directions with singular value {s[d_out - 1]:.3g}",
            RankDeficient,
            stacklevel=2,
        )
    total = float(np.sum(s**2))
    explained = float(np.sum(s[:d_out] ** 2) / total) if total > 0 else 1.0
    return Projection(Vt[:d_out].copy(), mean, explained)


def augment_constant(x, c: float) -> np.ndarray:
    """Append the constant ``c`` to a vector, or a constant column to a matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return np.append(x, c)
    return np.hstack([x, np.full((x.shape[0], 1), c)])


class OneHotEncoder:
    """Stacked indicator vectors for windows of integer symbols."""

    def __init__(self, n_symbols: int):
        self.n_symbols = int(n_symbols)

    def __call__(self, windows) -> np.ndarray:
        w = np.asarray(windows, dtype=np.int64)
        if w.ndim == 1:
            w = w[:, None]
        n, L = w.shape
        out = np.zeros((n, L * self.n_symbols))
        cols = w + self.n_symbols * np.arange(L)
        out[np.arange(n)[:, None], cols] = 1.0
        return out


class RffEncoder:
    """RFF of a flattened window, optionally followed by a projection."""

    def __init__(self, rff: RffMap, projection: Projection | None = None, chunk: int = 4096):
        self.rff = rff
        self.projection = projection
        self.chunk = chunk

    def __call__(self, windows) -> np.ndarray:
        X = np.asarray(windows, dtype=np.float64)
        X = X.reshape(X.shape[0], -1)
        out = []
        for start in range(0, X.shape[0], self.chunk):
            feats = apply_rff(self.rff, X[start : start + self.chunk])
            out.append(self.projection(feats) if self.projection is not None else feats)
        if not out:
            d = self.projection.out_dim if self.projection is not None else self.rff.n_features
            return np.zeros((0, d))
        return np.vstack(out)


class LinearEncoder:
    """Flattened window, optionally projected. Used for state streams."""

    def __init__(self, projection: Projection | None = None):
        self.projection = projection

    def __call__(self, windows) -> np.ndarray:
        X = np.asarray(windows, dtype=np.float64)
        X = X.reshape(X.shape[0], -1)
        return self.projection(X) if self.projection is not None else X


@dataclass
class Triples:
    """Row-aligned features; row ``r`` belongs to ``positions[r] = (sequence, t)``.

    ``has_next[r]`` marks rows whose successor row ``r + 1`` is the next time
    step of the same sequence, so ``(phi[r], phi[r + 1])`` is a valid pair.
    """

    eta: np.ndarray
    omega: np.ndarray
    phi: np.ndarray
    has_next: np.ndarray
    positions: np.ndarray

    def __len__(self):
        return self.eta.shape[0]

    def aligned(self):
        """``(eta, omega, phi, phi_next)`` restricted to rows with a successor."""
        idx = np.flatnonzero(self.has_next)
        return self.eta[idx], self.omega[idx], self.phi[idx], self.phi[idx + 1]


def window_starts(length: int, w: WindowSpec) -> np.ndarray:
    """0-based time indices ``t`` with a full past and future window."""
    return np.arange(w.past_len, length - w.future_len + 1)


def _windows(seq, starts, offset, length):
    idx = starts[:, None] + offset + np.arange(length)
    return seq[idx]


def build_triples(seqs, w: WindowSpec, enc: dict) -> Triples:
    """Encode history/observation/future windows for every valid time step.

    ``enc`` maps ``"history"``, ``"observation"`` and ``"future"`` to callables
    taking an array of stacked windows (``n x L`` for symbols, ``n x L x d``
    for vectors) and returning ``n x features``. At 0-based step ``t`` the
    history window is ``o[t-p:t]``, the observation is ``o[t]`` and the future
    window is ``o[t:t+k]``.
    """
    etas, omegas, phis, nexts, pos = [], [], [], [], []
    for sid, seq in enumerate(seqs):
        seq = np.asarray(seq)
        if seq.shape[0] < w.past_len + w.future_len:
            raise SequenceTooShort(
                f"sequence {sid} has length {seq.shape[0]}, need >= {w.past_len + w.future_len}"
            )
        starts = window_starts(seq.shape[0], w)
        etas.append(enc["history"](_windows(seq, starts, -w.past_len, w.past_len)))
        omegas.append(enc["observation"](_windows(seq, starts, 0, 1)))
        phis.append(enc["future"](_windows(seq, starts, 0, w.future_len)))
        nxt = np.ones(starts.shape[0], dtype=bool)
        nxt[-1] = False
        nexts.append(nxt)
        pos.append(np.column_stack([np.full(starts.shape[0], sid), starts]))
    return Triples(
        np.vstack(etas),
        np.vstack(omegas),
        np.vstack(phis),
        np.concatenate(nexts),
        np.vstack(pos),
    )
