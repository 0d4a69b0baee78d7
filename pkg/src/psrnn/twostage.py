"""Method-of-moments initialization of PSRNN layers and decoders.

For each layer the training stream is turned into history, observation and
future features (``eta``, ``omega``, ``phi``), their moments are accumulated,
and the update and normalization tensors are read off as

    W = (sum phi_{t+1} (x) omega_t (x) eta_t) x_3 P
    Z = (sum omega_t (x) omega_t (x) eta_t) x_3 P

with ``P`` a (ridge-regularized) pseudo-inverse of ``sum eta_t (x) phi_t``.
Deeper layers repeat the procedure on the filtered states of the layer below.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .errors import EmptyData, NormalizationUnderflow, RankWarning
from .features import (
    LinearEncoder,
    OneHotEncoder,
    RffEncoder,
    Triples,
    WindowSpec,
    augment_constant,
    build_triples,
    fit_bandwidth,
    fit_projection,
    sample_rff,
    window_starts,
)
from .model import Encoder, PsrnnCell, PsrnnModel, filter as run_filter
from .regress import MomentAccumulator, regularized_pinv, ridge_solve
from .tensor import mode_mat_product

__all__ = [
    "InitReport",
    "LayerEstimate",
    "moments",
    "estimate_q1",
    "estimate_W",
    "estimate_Z",
    "estimate_layer",
    "init_decoder",
    "symbol_encoders",
    "init_multilayer",
    "random_model",
]


@dataclass
class InitReport:
    dims: dict = field(default_factory=dict)
    ridge: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    state_error: list = field(default_factory=list)
    decoder_residual: float = 0.0
    underflows: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["layers"] = [
            {"ridge": lam, "residuals": res, "state_error": err}
            for lam, res, err in zip(self.ridge, self.residuals, self.state_error)
        ]
        return d


def moments(triples: Triples, const: float | None = None):
    """Accumulators for the W and Z regressions (future features augmented by ``const``)."""
    eta, omega, phi, phi_next = triples.aligned()
    if const is not None:
        phi = augment_constant(phi, const)
        phi_next = augment_constant(phi_next, const)
    acc_w = MomentAccumulator().add_batch(phi_next, omega, eta, eta, phi)
    acc_z = MomentAccumulator().add_batch(omega, omega, eta, eta, phi)
    return acc_w, acc_z


def estimate_q1(acc: MomentAccumulator, normalize: bool = True) -> np.ndarray:
    """Mean future feature; two-norm normalized unless ``normalize`` is False."""
    if acc.count == 0:
        raise EmptyData("no training examples were accumulated")
    q = acc.sum1 / acc.count
    if not normalize:
        return q
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise NormalizationUnderflow("mean future feature is zero")
    return q / n


def _apply_inverse(acc: MomentAccumulator, lam: float, rcond: float, rank: int | None) -> np.ndarray:
    if acc.count == 0:
        raise EmptyData("no training examples were accumulated")
    d_h, d_f = acc.sum2.shape
    if acc.count < d_f:
        warnings.warn(
            f"{acc.count} examples for {d_f} future features; the inverse is rank-limited",
            RankWarning,
            stacklevel=3,
        )
    P = regularized_pinv(acc.sum2, lam, rcond, rank)  # d_f x d_h
    return mode_mat_product(acc.sum3, 3, P)


def estimate_W(acc: MomentAccumulator, lam: float, rcond: float = 1e-10, rank: int | None = None) -> np.ndarray:
    """Update tensor of shape (d_f, d_o, d_f).

    ``rank`` truncates the inverted moment matrix to its leading singular
    directions, which is how the state dimension is imposed on indicator
    features.
    """
    return _apply_inverse(acc, lam, rcond, rank)


def estimate_Z(acc_z: MomentAccumulator, lam: float, rcond: float = 1e-10, rank: int | None = None) -> np.ndarray:
    """Normalization tensor of shape (d_o, d_o, d_f)."""
    return _apply_inverse(acc_z, lam, rcond, rank)


def _moment_residual(acc: MomentAccumulator, T: np.ndarray) -> float:
    # how well T x_3 phi_t reproduces the accumulated numerator, summed over t
    pred = mode_mat_product(T, 3, acc.sum2)
    denom = np.linalg.norm(acc.sum3)
    return float(np.linalg.norm(acc.sum3 - pred) / denom) if denom > 0 else 0.0


@dataclass
class LayerEstimate:
    W: np.ndarray
    Z: np.ndarray
    q1: np.ndarray  # unnormalized mean future feature
    ridge: float
    residuals: dict


def estimate_layer(triples: Triples, ridge: float, ridge_mode: str = "ridge",
                   const: float | None = None, rcond: float = 1e-10, rank: int | None = None) -> LayerEstimate:
    acc_w, acc_z = moments(triples, const)
    lam = ridge * acc_w.count if ridge_mode == "ridge" else 0.0
    W = estimate_W(acc_w, lam, rcond, rank)
    Z = estimate_Z(acc_z, lam, rcond, rank)
    res = {"W": _moment_residual(acc_w, W), "Z": _moment_residual(acc_z, Z)}
    return LayerEstimate(W, Z, estimate_q1(acc_w, normalize=False), lam, res)


def init_decoder(states, targets, lam: float, n_symbols: int | None = None):
    """Ridge regression (with unpenalized intercept) from states to targets.

    For continuous targets the result maps a state to the predicted next
    observation. For symbol targets (``n_symbols`` given) the regression is
    onto indicator vectors, giving a linear probability model ``p(q)``;
    it is turned into logits by linearizing ``log p`` around the smoothed
    marginal ``pbar``: ``logits = log pbar + (p(q) - pbar) / pbar``.

    Returns ``(weight, bias, residual)`` where ``residual`` is the mean
    squared regression error.
    """
    X = np.asarray(states, dtype=np.float64)
    if X.shape[0] == 0:
        raise EmptyData("decoder needs at least one aligned state/target pair")
    if n_symbols is not None:
        t = np.asarray(targets, dtype=np.int64)
        Y = np.zeros((t.shape[0], n_symbols))
        Y[np.arange(t.shape[0]), t] = 1.0
    else:
        Y = np.asarray(targets, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
    if Y.shape[0] != X.shape[0]:
        raise ValueError("states and targets are not aligned")
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    coef = ridge_solve(X - xm, Y - ym, lam)  # d_q x d_y
    weight = coef.T
    bias = ym - weight @ xm
    residual = float(np.mean(np.sum((X @ weight.T + bias - Y) ** 2, axis=1)))
    if n_symbols is not None:
        pbar = (Y.sum(axis=0) + 1.0) / (Y.shape[0] + n_symbols)
        weight = weight / pbar[:, None]
        bias = np.log(pbar) + (bias - pbar) / pbar
    return np.ascontiguousarray(weight), np.ascontiguousarray(bias), residual


def _maybe_project(encoder, windows, width, cfg: RunConfig):
    """Wrap a feature map with an SVD projection when it is wider than ``cfg.states``."""
    if width <= cfg.states:
        return encoder
    feats = encoder(windows)
    if feats.shape[0] > cfg.projection_rows:
        rng = np.random.default_rng(cfg.seed)
        feats = feats[np.sort(rng.choice(feats.shape[0], cfg.projection_rows, replace=False))]
    proj = fit_projection(feats, min(cfg.states, *feats.shape))
    return lambda w, enc=encoder, p=proj: p(enc(w))


def _stacked(seqs, w: WindowSpec, offset: int, length: int):
    out = []
    for seq in seqs:
        seq = np.asarray(seq)
        starts = window_starts(seq.shape[0], w)
        out.append(seq[starts[:, None] + offset + np.arange(length)])
    return np.concatenate(out)


def symbol_encoders(n_symbols: int, w: WindowSpec, cfg: RunConfig, seqs):
    """Indicator encoders for symbol streams (history/future projected if too wide)."""
    base = OneHotEncoder(n_symbols)
    hist = _maybe_project(base, _stacked(seqs, w, -w.past_len, w.past_len), w.past_len * n_symbols, cfg)
    fut = _maybe_project(base, _stacked(seqs, w, 0, w.future_len), w.future_len * n_symbols, cfg)
    enc = {"history": hist, "observation": base, "future": fut}
    model_enc = Encoder("onehot", np.eye(n_symbols), np.zeros(n_symbols))
    return enc, model_enc


def _rff_stream(windows, cfg: RunConfig, seed: int, bandwidth=None):
    X = windows.reshape(windows.shape[0], -1)
    sigma = bandwidth or fit_bandwidth(X, seed=seed)
    rff = sample_rff(X.shape[1], cfg.rff_count, sigma, seed=seed)
    rows = X
    if rows.shape[0] > cfg.projection_rows:
        rng = np.random.default_rng(seed)
        rows = rows[np.sort(rng.choice(rows.shape[0], cfg.projection_rows, replace=False))]
    feats = RffEncoder(rff)(rows)
    proj = fit_projection(feats, min(cfg.states, *feats.shape))
    return rff, proj


def vector_encoders(w: WindowSpec, cfg: RunConfig, seqs):
    """RFF + projection encoders for continuous streams, fitted on ``seqs``."""
    s = cfg.seed
    hist_rff, hist_proj = _rff_stream(_stacked(seqs, w, -w.past_len, w.past_len), cfg, s + 11, cfg.bandwidth)
    obs_rff, obs_proj = _rff_stream(_stacked(seqs, w, 0, 1), cfg, s + 12, cfg.bandwidth)
    fut_rff, fut_proj = _rff_stream(_stacked(seqs, w, 0, w.future_len), cfg, s + 13, cfg.bandwidth)
    enc = {
        "history": RffEncoder(hist_rff, hist_proj),
        "observation": RffEncoder(obs_rff, obs_proj),
        "future": RffEncoder(fut_rff, fut_proj),
    }
    model_enc = Encoder("rff", obs_proj.basis.copy(), -obs_proj.basis @ obs_proj.mean, rff=obs_rff)
    return enc, model_enc


def state_encoders(w: WindowSpec, cfg: RunConfig, seqs):
    """Linear encoders for a stream of lower-layer states (observation used as is)."""
    d = np.asarray(seqs[0]).shape[1]
    hist = _maybe_project(LinearEncoder(), _stacked(seqs, w, -w.past_len, w.past_len), w.past_len * d, cfg)
    fut = _maybe_project(LinearEncoder(), _stacked(seqs, w, 0, w.future_len), w.future_len * d, cfg)
    return {"history": hist, "observation": LinearEncoder(), "future": fut}


def _state_error(states_by_seq, triples: Triples, const, lam_scale: float) -> float:
    """Fraction of future-feature variance not linearly explained by the filtered state."""
    phi = triples.phi if const is None else augment_constant(triples.phi, const)
    X = np.vstack([states_by_seq[sid][t] for sid, t in triples.positions])
    xm, ym = X.mean(axis=0), phi.mean(axis=0)
    coef = ridge_solve(X - xm, phi - ym, lam_scale * X.shape[0])
    resid = (X - xm) @ coef - (phi - ym)
    var = np.sum((phi - ym) ** 2)
    return float(np.sum(resid**2) / var) if var > 0 else 0.0


def init_multilayer(train_seqs, kind: str, cfg: RunConfig, n_symbols: int | None = None):
    """Initialize an ``cfg.layers``-deep PSRNN and its decoder from training sequences.

    ``train_seqs`` are integer symbol arrays for ``kind == "discrete"`` and
    ``(T, d)`` float arrays otherwise. Returns ``(model, InitReport)``.
    """
    cfg = cfg.resolved(kind)
    w = WindowSpec(cfg.past_len, cfg.future_len)
    const = cfg.state_const
    report = InitReport()

    if kind == "discrete" and not cfg.discrete_rff:
        enc, model_enc = symbol_encoders(n_symbols, w, cfg, train_seqs)
        stream = list(train_seqs)
    else:
        if kind == "discrete":
            stream = [np.eye(n_symbols)[np.asarray(s)] for s in train_seqs]
        else:
            stream = [np.asarray(s, dtype=np.float64) for s in train_seqs]
        enc, model_enc = vector_encoders(w, cfg, stream)

    layers, q1s = [], []
    for level in range(cfg.layers):
        if level > 0:
            enc = state_encoders(w, cfg, stream)
        triples = build_triples(stream, w, enc)
        est = estimate_layer(triples, cfg.ridge, cfg.ridge_mode, const, rank=cfg.states)
        q1 = est.q1 / np.linalg.norm(est.q1)
        layers.append(PsrnnCell(est.W, np.zeros(est.W.shape[0])))
        q1s.append(q1)
        report.ridge.append(est.ridge)
        report.residuals.append(est.residuals)

        partial = PsrnnModel(
            kind, model_enc, list(layers), list(q1s),
            np.zeros((1, est.W.shape[0])), np.zeros(1),
        )
        outputs = [run_filter(partial, s, guard=True) for s in train_seqs]
        report.underflows += sum(o.underflows for o in outputs)
        # With b = 0 the normalized trajectory does not depend on the scale
        # of W; fix it so preactivations have unit mean norm, which keeps
        # gradient steps proportionate during refinement.
        scale = float(np.mean(np.concatenate([o.norms[-1] for o in outputs])))
        if scale > 0:
            layers[-1].W /= scale
        report.extra.setdefault("w_scale", []).append(scale)
        states = [o.states[-1] for o in outputs]
        report.state_error.append(_state_error(states, triples, const, cfg.decoder_ridge))
        stream = [s[1:] for s in states]  # q_{t+1} is the next layer's observation at t

    top = np.vstack([s[:-1] for s in stream])  # states after o_1 .. o_{T-1}
    targets = np.concatenate([np.asarray(s)[1:] for s in train_seqs])
    lam = cfg.decoder_ridge * top.shape[0]
    dw, db, resid = init_decoder(top, targets, lam, n_symbols if kind == "discrete" else None)
    report.decoder_residual = resid
    report.dims = {
        "input": int(model_enc.out_dim),
        "states": [int(c.state_dim) for c in layers],
        "output": int(db.shape[0]),
        "future_len": cfg.future_len,
        "past_len": cfg.past_len,
    }
    model = PsrnnModel(kind, model_enc, layers, q1s, dw, db)
    model.metadata = {"kind": kind, "config_hash": cfg.hash(), "init": "2sr"}
    return model, report


def random_model(template: PsrnnModel, seed: int = 0, scale: float = 0.5) -> PsrnnModel:
    """Same architecture as ``template`` with Gaussian random parameters.

    Cell and decoder weights are scaled by ``scale / sqrt(fan_in)``; biases
    start at zero and initial states are random unit vectors. The encoder is
    kept, since it is a fixed feature map rather than a learned quantity at
    initialization.
    """
    rng = np.random.default_rng(seed)
    out = template.copy()
    new_layers, q1s = [], []
    for cell in out.layers:
        d_q, d_o = cell.state_dim, cell.input_dim
        W = rng.normal(0.0, scale / np.sqrt(d_o * d_q), size=(d_q, d_o, d_q))
        new_layers.append(PsrnnCell(W, np.zeros(d_q)))
        q = rng.normal(size=d_q)
        q1s.append(q / np.linalg.norm(q))
    out.layers = new_layers
    out.q1 = q1s
    d_out, d_top = out.decoder_weight.shape
    out.decoder_weight = rng.normal(0.0, scale / np.sqrt(d_top), size=(d_out, d_top))
    out.decoder_bias = np.zeros(d_out)
    out.metadata = dict(out.metadata, init="random", init_seed=int(seed))
    return out
