"""Exact hidden Markov model filtering used as ground truth."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IoError, ZeroProbabilityObservation

__all__ = [
    "HmmSpec",
    "FilterResult",
    "random_spec",
    "cycle_spec",
    "pair_moments",
    "sample",
    "forward_filter",
    "enumerate_predictive",
]


@dataclass(frozen=True)
class HmmSpec:
    """Discrete HMM with column-stochastic matrices.

    ``transition[j, i]`` is P(next state j | state i) and ``emission[o, i]``
    is P(symbol o | state i).
    """

    transition: np.ndarray
    emission: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        S, O, pi = self.transition, self.emission, self.initial
        s = S.shape[0]
        if S.shape != (s, s) or O.shape[1] != s or pi.shape != (s,):
            raise ValueError(f"inconsistent HMM shapes {S.shape}, {O.shape}, {pi.shape}")
        for name, m in (("transition", S), ("emission", O), ("initial", pi[:, None])):
            if np.any(m < 0) or not np.allclose(m.sum(axis=0), 1.0, atol=1e-12, rtol=0):
                raise ValueError(f"{name} columns must be probability vectors")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.emission.shape[0]

    def stationary(self) -> np.ndarray:
        vals, vecs = np.linalg.eig(self.transition)
        v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
        return v / v.sum()

    def to_json(self) -> str:
        return json.dumps(
            {
                "transition": self.transition.tolist(),
                "emission": self.emission.tolist(),
                "initial": self.initial.tolist(),
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "HmmSpec":
        d = json.loads(text)
        return cls(
            np.asarray(d["transition"], dtype=np.float64),
            np.asarray(d["emission"], dtype=np.float64),
            np.asarray(d["initial"], dtype=np.float64),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "HmmSpec":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IoError(f"cannot read HMM spec {path}: {exc}") from exc
        try:
            return cls.from_json(text)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid HMM spec {path}: {exc}") from exc


def _dirichlet_columns(rng, rows, cols):
    m = rng.dirichlet(np.ones(rows), size=cols).T
    return m / m.sum(axis=0)


def pair_moments(spec: HmmSpec, pi=None) -> np.ndarray:
    """``P[a, b] = P(o_{t+1} = a, o_t = b)`` with the state at ``t`` distributed as ``pi``."""
    pi = spec.stationary() if pi is None else pi
    return spec.emission @ spec.transition @ np.diag(pi) @ spec.emission.T


def random_spec(n_states: int = 3, n_symbols: int = 4, seed: int = 0, min_singular: float = 2e-3) -> HmmSpec:
    """Draw a well-conditioned random HMM with Dirichlet(1) columns.

    Draws are rejected and redrawn when the stationary distribution puts
    less than 5% on some state, when some symbol has marginal probability
    below 5%, or when the stationary pair-moment matrix has its
    ``min(n_states, n_symbols)``-th singular value below ``min_singular``
    (such systems are not identifiable from one-step windows at practical
    sample sizes). The initial distribution is the stationary one, so
    sampled sequences are stationary from the first step.
    """
    rng = np.random.default_rng(seed)
    while True:
        S = _dirichlet_columns(rng, n_states, n_states)
        O = _dirichlet_columns(rng, n_symbols, n_states)
        pi = np.ones(n_states) / n_states
        spec = HmmSpec(S, O, pi)
        stat = np.clip(spec.stationary(), 0.0, None)
        stat /= stat.sum()
        if stat.min() < 0.05 or (O @ stat).min() < 0.05:
            continue
        if np.linalg.matrix_rank(O) < min(n_states, n_symbols):
            continue
        sv = np.linalg.svd(pair_moments(spec, stat), compute_uv=False)
        if sv[min(n_states, n_symbols) - 1] < min_singular:
            continue
        return HmmSpec(S, O, stat)


def cycle_spec(n_states: int = 2, noise: float = 0.0) -> HmmSpec:
    """Deterministic state cycle; state i emits symbol i with prob ``1 - noise``."""
    S = np.roll(np.eye(n_states), 1, axis=0)
    O = np.full((n_states, n_states), noise / max(n_states - 1, 1))
    np.fill_diagonal(O, 1.0 - noise)
    if n_states == 1:
        O[:] = 1.0
    return HmmSpec(S, O, np.ones(n_states) / n_states)


def sample(spec: HmmSpec, T: int, seed: int = 0) -> np.ndarray:
    """Sample a length-``T`` symbol sequence."""
    rng = np.random.default_rng(seed)
    out = np.empty(T, dtype=np.int64)
    if T == 0:
        return out
    cum_S = np.cumsum(spec.transition, axis=0)
    cum_O = np.cumsum(spec.emission, axis=0)
    u_state = rng.random(T)
    u_obs = rng.random(T)
    state = min(int(np.searchsorted(np.cumsum(spec.initial), u_state[0], side="right")), spec.n_states - 1)
    n_sym = spec.n_symbols - 1
    n_st = spec.n_states - 1
    for t in range(T):
        out[t] = min(int(np.searchsorted(cum_O[:, state], u_obs[t], side="right")), n_sym)
        if t + 1 < T:
            state = min(int(np.searchsorted(cum_S[:, state], u_state[t + 1], side="right")), n_st)
    return out


@dataclass(frozen=True)
class FilterResult:
    """Forward-filter output for a sequence ``o_1 .. o_T``.

    ``beliefs[t]`` is P(state_t | o_1..o_t) and ``predictive[t]`` is
    P(o_{t+1} | o_1..o_t). ``bpc`` and ``ospa`` score ``predictive[:-1]``
    against ``o_2 .. o_T``.
    """

    beliefs: np.ndarray
    predictive: np.ndarray
    bpc: float
    ospa: float


def forward_filter(spec: HmmSpec, sequence) -> FilterResult:
    seq = np.asarray(sequence, dtype=np.int64)
    T = seq.shape[0]
    s, m = spec.n_states, spec.n_symbols
    beliefs = np.zeros((T, s))
    predictive = np.zeros((T, m))
    if T and (seq.min() < 0 or seq.max() >= m):
        raise ValueError("symbol outside the HMM alphabet")
    prior = spec.initial
    OS = spec.emission @ spec.transition
    for t in range(T):
        joint = spec.emission[seq[t]] * prior
        z = joint.sum()
        if z <= 0:
            raise ZeroProbabilityObservation(f"symbol {seq[t]} has zero probability at step {t}")
        beliefs[t] = joint / z
        predictive[t] = OS @ beliefs[t]
        prior = spec.transition @ beliefs[t]
    if T >= 2:
        p = predictive[np.arange(T - 1), seq[1:]]
        bpc = float(-np.mean(np.log2(p)))
        ospa = float(np.mean(np.argmax(predictive[:-1], axis=1) == seq[1:]))
    else:
        bpc = ospa = float("nan")
    return FilterResult(beliefs, predictive, bpc, ospa)


def joint_probability(spec: HmmSpec, sequence) -> float:
    """P(o_1..o_t) by summing over every hidden state path."""
    seq = list(sequence)
    total = 0.0
    for path in itertools.product(range(spec.n_states), repeat=len(seq)):
        p = spec.initial[path[0]] * spec.emission[seq[0], path[0]]
        for t in range(1, len(seq)):
            p *= spec.transition[path[t], path[t - 1]] * spec.emission[seq[t], path[t]]
        total += p
    return total


def enumerate_predictive(spec: HmmSpec, sequence) -> np.ndarray:
    """Brute-force P(o_{t+1} | o_1..o_t) as ratios of enumerated joints."""
    seq = list(sequence)
    out = np.zeros((len(seq), spec.n_symbols))
    for t in range(1, len(seq) + 1):
        base = joint_probability(spec, seq[:t])
        for o in range(spec.n_symbols):
            out[t - 1, o] = joint_probability(spec, seq[:t] + [o]) / base
    return out
