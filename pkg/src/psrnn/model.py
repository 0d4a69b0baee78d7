"""PSRNN cells, filtering and CP factorization of trained models.

A layer maps ``(state q, observation o)`` to the next unit-norm state::

    u = W x_2 o x_3 q + b,      q' = u / |u|_2

or, in factorized form, ``u = A^T (B o * C q) + b``. Layers stack by feeding
the post-normalization state of layer ``l`` as the observation of layer
``l + 1``; the decoder reads the top state.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NormalizationUnderflow, SingularNormalizer
from .features import RffMap, apply_rff
from .tensor import CpFactors, contract_vec, cp_als, cp_reconstruct

NORM_EPS = 1e-12

__all__ = [
    "Encoder",
    "PsrnnCell",
    "FactorizedCell",
    "PsrnnModel",
    "Trace",
    "FilterOutput",
    "cell_update",
    "cell_update_full_norm",
    "factorized_update",
    "full_norm_filter",
    "run",
    "filter",
    "factorize_model",
    "normalization_angle",
]


@dataclass
class Encoder:
    """Affine map from per-step input features to cell observations.

    ``kind`` is ``"onehot"`` (inputs are integer symbols, so the product
    with ``weight`` is a column lookup), ``"rff"`` (inputs are raw vectors
    lifted by the fixed ``rff`` map) or ``"identity"`` (raw vectors used as is).
    """

    kind: str
    weight: np.ndarray
    bias: np.ndarray
    rff: RffMap | None = None

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def prepare(self, raw) -> np.ndarray:
        """Turn a raw sequence into the inputs consumed by :meth:`apply`."""
        if self.kind == "onehot":
            return np.asarray(raw, dtype=np.int64)
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim == 1:
            raw = raw[:, None]
        if self.kind == "rff":
            return apply_rff(self.rff, raw)
        return raw

    def apply(self, inputs) -> np.ndarray:
        if self.kind == "onehot":
            return self.weight.T[inputs] + self.bias
        return inputs @ self.weight.T + self.bias


@dataclass
class PsrnnCell:
    W: np.ndarray  # d_q x d_o x d_q
    b: np.ndarray

    def __post_init__(self):
        if self.W.ndim != 3 or self.W.shape[0] != self.W.shape[2] or self.b.shape != (self.W.shape[0],):
            raise DimensionMismatch(f"inconsistent cell shapes W {self.W.shape}, b {self.b.shape}")

    @property
    def state_dim(self) -> int:
        return self.W.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    def preactivation(self, q, o) -> np.ndarray:
        """``W x_2 o x_3 q + b`` for a vector pair or for batches of rows."""
        if q.ndim == 1:
            return contract_vec(self.W, 2, o) @ q + self.b
        return np.einsum("ijl,bj,bl->bi", self.W, o, q, optimize=True) + self.b


@dataclass
class FactorizedCell:
    A: np.ndarray  # n x d_q
    B: np.ndarray  # n x d_o
    C: np.ndarray  # n x d_q
    b: np.ndarray

    def __post_init__(self):
        n = self.A.shape[0]
        if self.B.shape[0] != n or self.C.shape[0] != n:
            raise DimensionMismatch("factorized cell factors must share their rank")
        if self.A.shape[1] != self.C.shape[1] or self.b.shape != (self.A.shape[1],):
            raise DimensionMismatch("factorized cell state dims disagree")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    def preactivation(self, q, o) -> np.ndarray:
        return ((o @ self.B.T) * (q @ self.C.T)) @ self.A + self.b


def _normalize(u, guard: bool):
    n = np.sqrt(np.einsum("...i,...i->...", u, u))
    low = n < NORM_EPS
    if low.any():
        if not guard:
            raise NormalizationUnderflow(f"pre-normalization norm {float(n.min()):.3g} < {NORM_EPS}")
        n = np.maximum(n, NORM_EPS)
    return u / n[..., None], n, int(np.count_nonzero(low))


def cell_update(cell: PsrnnCell, q, o) -> np.ndarray:
    q, o = np.asarray(q, dtype=np.float64), np.asarray(o, dtype=np.float64)
    if q.shape[-1] != cell.state_dim or o.shape[-1] != cell.input_dim:
        raise DimensionMismatch(f"cell expects q of dim {cell.state_dim} and o of dim {cell.input_dim}")
    return _normalize(cell.preactivation(q, o), guard=False)[0]


def factorized_update(cell: FactorizedCell, q, o) -> np.ndarray:
    q, o = np.asarray(q, dtype=np.float64), np.asarray(o, dtype=np.float64)
    if q.shape[-1] != cell.state_dim or o.shape[-1] != cell.input_dim:
        raise DimensionMismatch(f"cell expects q of dim {cell.state_dim} and o of dim {cell.input_dim}")
    return _normalize(cell.preactivation(q, o), guard=False)[0]


def cell_update_full_norm(W, Z, q, o, eps_inv: float = 1e-8) -> np.ndarray:
    """Predictive-state update with the explicit normalizer.

    Computes ``(W x_3 q) (Z x_3 q + eps I)^{-1} o`` and rescales it to sum to
    one. Only meaningful for indicator observations.
    """
    M = contract_vec(W, 3, q)
    N = contract_vec(Z, 3, q) + eps_inv * np.eye(Z.shape[0])
    try:
        col = np.linalg.solve(N, o)
    except np.linalg.LinAlgError as exc:
        raise SingularNormalizer("normalizer is singular after regularization") from exc
    raw = M @ col
    total = raw.sum()
    if not np.isfinite(total) or abs(total) < NORM_EPS:
        raise SingularNormalizer("updated state has zero mass")
    return raw / total


def full_norm_filter(W, Z, q1, observations, eps_inv: float = 1e-8) -> np.ndarray:
    """Run :func:`cell_update_full_norm` along a sequence of indicator rows.

    Returns ``len(observations) + 1`` states, starting with ``q1 / sum(q1)``.
    """
    obs = np.asarray(observations, dtype=np.float64)
    states = np.empty((obs.shape[0] + 1, W.shape[0]))
    states[0] = q1 / q1.sum()
    for t in range(obs.shape[0]):
        states[t + 1] = cell_update_full_norm(W, Z, states[t], obs[t], eps_inv)
    return states


def normalization_angle(x, c: float) -> float:
    """Angle between ``[x / sum(x), c]`` and ``[x, c] / |[x, c]|_2``.

    The first vector is a sum-normalized state with a constant feature
    appended; the second two-norm normalizes the raw update carrying the
    same constant. For strictly positive ``x`` the angle shrinks as ``c``
    grows and the sphere's curvature over the state set becomes negligible.
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.append(x / x.sum(), c)
    t = np.append(x, c)
    t = t / np.linalg.norm(t)
    cos = s @ t / np.linalg.norm(s)
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


@dataclass
class PsrnnModel:
    kind: str  # "discrete" or "continuous"
    encoder: Encoder
    layers: list
    q1: list
    decoder_weight: np.ndarray
    decoder_bias: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.layers) != len(self.q1) or not self.layers:
            raise DimensionMismatch("need one initial state per layer and at least one layer")
        in_dim = self.encoder.out_dim
        for i, (cell, q) in enumerate(zip(self.layers, self.q1)):
            if cell.input_dim != in_dim:
                raise DimensionMismatch(f"layer {i} expects inputs of dim {cell.input_dim}, gets {in_dim}")
            if q.shape != (cell.state_dim,):
                raise DimensionMismatch(f"layer {i} initial state has shape {q.shape}")
            in_dim = cell.state_dim
        if self.decoder_weight.shape[1] != in_dim:
            raise DimensionMismatch("decoder does not match the top state dimension")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def factorized(self) -> bool:
        return any(isinstance(c, FactorizedCell) for c in self.layers)

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name; the arrays are the model's own storage."""
        params = {"encoder.weight": self.encoder.weight, "encoder.bias": self.encoder.bias}
        for i, cell in enumerate(self.layers):
            if isinstance(cell, FactorizedCell):
                params.update({f"layer{i}.A": cell.A, f"layer{i}.B": cell.B, f"layer{i}.C": cell.C})
            else:
                params[f"layer{i}.W"] = cell.W
            params[f"layer{i}.b"] = cell.b
            params[f"layer{i}.q1"] = self.q1[i]
        params["decoder.weight"] = self.decoder_weight
        params["decoder.bias"] = self.decoder_bias
        return params

    def copy(self) -> "PsrnnModel":
        return copy.deepcopy(self)

    def decode(self, q) -> np.ndarray:
        return q @ self.decoder_weight.T + self.decoder_bias


@dataclass
class Trace:
    """Everything the backward pass needs from one forward window.

    Per layer: ``inputs`` (B, h, d_in), ``states`` (B, h + 1, d_q) starting
    with the carried state, pre-normalization ``pre`` (B, h, d_q) and their
    norms (B, h). ``obs`` is the encoder output, ``outputs`` the decoder's.
    """

    enc_inputs: np.ndarray
    obs: np.ndarray
    inputs: list
    states: list
    pre: list
    norms: list
    outputs: np.ndarray
    underflows: int = 0

    @property
    def final_states(self) -> list:
        return [s[:, -1] for s in self.states]


_CHUNK_FLOATS = 1 << 21  # bound on the size of a block of precomputed step matrices


def _layer_forward(cell, q0, layer_in, guard: bool):
    """Unroll one layer; observation-dependent factors are formed in blocks."""
    B, h = layer_in.shape[:2]
    d = cell.state_dim
    dtype = np.result_type(layer_in, q0, cell.b)
    st = np.empty((B, h + 1, d), dtype=dtype)
    st[:, 0] = q0
    pre = np.empty((B, h, d), dtype=dtype)
    nrm = np.empty((B, h), dtype=dtype)
    underflows = 0
    b = cell.b
    if isinstance(cell, FactorizedCell):
        gate = layer_in @ cell.B.T  # (B, h, n)
        CT, A = cell.C.T, cell.A
        for t in range(h):
            u = (gate[:, t] * (st[:, t] @ CT)) @ A + b
            st[:, t + 1], nrm[:, t], k = _normalize(u, guard)
            pre[:, t] = u
            underflows += k
        return st, pre, nrm, underflows
    chunk = max(1, _CHUNK_FLOATS // (B * d * d))
    for start in range(0, h, chunk):
        stop = min(h, start + chunk)
        # M[b, t] = W x_2 o_t, so that u = M q + b
        M = np.einsum("ijl,btj->btil", cell.W, layer_in[:, start:stop], optimize=True)
        for t in range(start, stop):
            u = np.matmul(M[:, t - start], st[:, t, :, None])[..., 0] + b
            st[:, t + 1], nrm[:, t], k = _normalize(u, guard)
            pre[:, t] = u
            underflows += k
    return st, pre, nrm, underflows


def run(model: PsrnnModel, enc_inputs, init_states, guard: bool = True) -> Trace:
    """Batched forward pass over a window.

    ``enc_inputs`` has shape (B, h) for symbol inputs or (B, h, D) otherwise;
    ``init_states`` holds one (B, d_q) array per layer.
    """
    obs = model.encoder.apply(enc_inputs)
    layer_in = obs
    inputs, states, pres, norms = [], [], [], []
    underflows = 0
    for cell, q0 in zip(model.layers, init_states):
        st, pre, nrm, k = _layer_forward(cell, q0, layer_in, guard)
        underflows += k
        inputs.append(layer_in)
        states.append(st)
        pres.append(pre)
        norms.append(nrm)
        layer_in = st[:, 1:]
    outputs = model.decode(layer_in)
    return Trace(enc_inputs, obs, inputs, states, pres, norms, outputs, underflows)


@dataclass
class FilterOutput:
    states: list  # per layer, (T + 1, d_q) including q1
    predictions: np.ndarray  # (T, d_out); row t predicts observation t + 1
    underflows: int = 0
    norms: list = field(default_factory=list)  # per layer, (T,) pre-normalization norms


def filter(model: PsrnnModel, raw_sequence, guard: bool = False) -> FilterOutput:
    """Filter one raw sequence left to right from the model's initial states."""
    raw = np.asarray(raw_sequence)
    if raw.shape[0] == 0:
        return FilterOutput(
            [np.asarray(q)[None] for q in model.q1],
            np.zeros((0, model.decoder_bias.shape[0])),
            norms=[np.zeros(0) for _ in model.layers],
        )
    inputs = model.encoder.prepare(raw)[None]
    trace = run(model, inputs, [q[None] for q in model.q1], guard=guard)
    return FilterOutput(
        [s[0] for s in trace.states], trace.outputs[0], trace.underflows, [n[0] for n in trace.norms]
    )


def factorize_model(
    model: PsrnnModel,
    rank: int,
    eps_bias: float = 0.1,
    train_sequences=None,
    seed: int = 0,
    override_bias: bool = True,
) -> PsrnnModel:
    """Replace every full cell by rank-``rank`` CP factors of its tensor.

    With ``override_bias`` the bias of each factorized layer becomes
    ``eps_bias`` times that layer's mean filtered state over
    ``train_sequences`` (filtered with the unfactorized model); the original
    biases are kept in the metadata.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    out = model.copy()
    mean_states = None
    if override_bias:
        if train_sequences is None:
            raise ValueError("bias override needs training sequences for the mean state")
        sums = [np.zeros(c.state_dim) for c in model.layers]
        count = 0
        for seq in train_sequences:
            res = filter(model, seq, guard=True)
            for i, s in enumerate(res.states):
                sums[i] += s[1:].sum(axis=0)
            count += len(seq)
        mean_states = [s / max(count, 1) for s in sums]

    errors = []
    original_bias = []
    for i, cell in enumerate(model.layers):
        if isinstance(cell, FactorizedCell):
            raise ValueError(f"layer {i} is already factorized")
        F: CpFactors = cp_als(cell.W, rank, seed=seed + i)
        errors.append(F.history[-1] if F.history else 0.0)
        original_bias.append(cell.b.tolist())
        b = eps_bias * mean_states[i] if override_bias else cell.b.copy()
        out.layers[i] = FactorizedCell(F.A.copy(), F.B.copy(), F.C.copy(), b)
    out.metadata = dict(model.metadata)
    out.metadata.update(
        {
            "rank": int(rank),
            "eps_bias": float(eps_bias),
            "bias_override": bool(override_bias),
            "original_bias": original_bias,
            "cp_relative_error": errors,
        }
    )
    return out


def reconstruct_cell(cell: FactorizedCell) -> PsrnnCell:
    return PsrnnCell(cp_reconstruct(CpFactors(cell.A, cell.B, cell.C)), cell.b.copy())
