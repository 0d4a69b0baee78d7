"""Losses, truncated BPTT through the normalized bilinear recurrence, and SGD.

Gradients are computed by hand. The only non-trivial local derivative is the
two-norm normalization ``q = u / |u|``, whose vector-Jacobian product is
``(g - q (q . g)) / |u|``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import DimensionMismatch, EmptyData, NonFiniteGradient
from .model import FactorizedCell, PsrnnModel, run

log = logging.getLogger(__name__)

__all__ = [
    "loss_bpc",
    "loss_mse",
    "metric_ospa",
    "normalization_vjp",
    "window_loss",
    "bptt_backward",
    "batchify",
    "evaluate",
    "sgd_refine",
    "TrainResult",
    "GradCheckReport",
    "grad_check",
    "write_curves",
]

LN2 = np.log(2.0)


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def loss_bpc(logits, targets) -> float:
    """Mean negative log2-probability of the targets under softmax(logits)."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise EmptyData("no steps to score")
    lp = _log_softmax(logits.reshape(-1, logits.shape[-1]))
    return float(-lp[np.arange(lp.shape[0]), targets.reshape(-1)].mean() / LN2)


def metric_ospa(logits, targets) -> float:
    """Fraction of steps whose highest logit is the target."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise EmptyData("no steps to score")
    return float(np.mean(logits.reshape(-1, logits.shape[-1]).argmax(axis=1) == targets.reshape(-1)))


def loss_mse(preds, targets) -> float:
    """Mean over steps of the squared Euclidean prediction error."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.size == 0:
        raise EmptyData("no steps to score")
    if preds.shape != targets.shape:
        raise DimensionMismatch(f"predictions {preds.shape} vs targets {targets.shape}")
    d = preds.shape[-1] if preds.ndim > 1 else 1
    return float(np.sum((preds - targets) ** 2) / (preds.size // d))


def normalization_vjp(u, g) -> np.ndarray:
    """Vector-Jacobian product of ``u -> u / |u|`` (rows are independent)."""
    u = np.asarray(u, dtype=np.float64)
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    q = u / n
    return (g - q * np.sum(q * g, axis=-1, keepdims=True)) / n


def _loss_and_grad(outputs, targets, kind: str):
    if kind == "discrete":
        targets = np.asarray(targets, dtype=np.int64)
        lp = _log_softmax(outputs)
        n = targets.size
        flat = lp.reshape(-1, lp.shape[-1])
        idx = np.arange(flat.shape[0]), targets.reshape(-1)
        loss = -flat[idx].mean()
        g = np.exp(flat)
        g[idx] -= 1.0
        return loss, (g / n).reshape(outputs.shape)
    targets = np.asarray(targets, dtype=np.float64)
    diff = outputs - targets
    steps = diff.size // diff.shape[-1]
    return np.sum(diff**2) / steps, 2.0 * diff / steps


def window_loss(model: PsrnnModel, enc_inputs, targets, init_states=None, guard: bool = True) -> float:
    """Forward-only mean loss of one window.

    Symbol models use cross-entropy in nats (the training objective; BPC is
    the same quantity divided by ln 2), vector models the squared error.
    The result is a numpy scalar of the model's floating type.
    """
    if init_states is None:
        B = enc_inputs.shape[0]
        init_states = [np.tile(q, (B, 1)) for q in model.q1]
    trace = run(model, enc_inputs, init_states, guard=guard)
    return _loss_and_grad(trace.outputs, targets, model.kind)[0]


def bptt_backward(model: PsrnnModel, enc_inputs, targets, init_states=None, guard: bool = True, step=None):
    """Loss and exact gradients for one window of a batch of streams.

    ``enc_inputs`` is ``(B, h)`` (symbols) or ``(B, h, D)`` (prepared
    vectors) and ``targets`` holds the observation following each input.
    With ``init_states=None`` every stream starts from the model's ``q1``
    and ``q1`` receives a gradient; otherwise the given states are treated
    as constants (truncation). Returns ``(loss, grads, trace)`` with
    ``grads`` keyed like :meth:`PsrnnModel.parameters`.
    """
    enc_inputs = np.asarray(enc_inputs)
    if enc_inputs.ndim < 2 or enc_inputs.shape[1] == 0:
        raise EmptyData("window must contain at least one step")
    B = enc_inputs.shape[0]
    from_q1 = init_states is None
    if from_q1:
        init_states = [np.tile(q, (B, 1)) for q in model.q1]
    trace = run(model, enc_inputs, init_states, guard=guard)
    loss, g_out = _loss_and_grad(trace.outputs, targets, model.kind)
    loss = float(loss)

    grads = {k: np.zeros_like(v) for k, v in model.parameters().items()}
    top = trace.states[-1][:, 1:]
    grads["decoder.weight"] = np.einsum("bto,btd->od", g_out, top)
    grads["decoder.bias"] = g_out.sum(axis=(0, 1))
    g_ext = g_out @ model.decoder_weight  # gradient w.r.t. the layer's output states

    for i in reversed(range(model.n_layers)):
        cell = model.layers[i]
        inp, st, nrm = trace.inputs[i], trace.states[i], trace.norms[i]
        h = inp.shape[1]
        Q = st[:, :-1]
        G_u = np.empty_like(trace.pre[i])
        g_q = np.zeros_like(st[:, 0])
        if isinstance(cell, FactorizedCell):
            gate = inp @ cell.B.T  # (B, h, n)
            for t in reversed(range(h)):
                g = g_ext[:, t] + g_q
                qn = st[:, t + 1]
                g_u = (g - qn * np.sum(qn * g, axis=1, keepdims=True)) / nrm[:, t, None]
                G_u[:, t] = g_u
                g_q = ((g_u @ cell.A.T) * gate[:, t]) @ cell.C
            g_z = G_u @ cell.A.T  # (B, h, n)
            cq = Q @ cell.C.T
            grads[f"layer{i}.A"] = np.einsum("btn,btd->nd", gate * cq, G_u)
            grads[f"layer{i}.B"] = np.einsum("btn,btj->nj", g_z * cq, inp)
            grads[f"layer{i}.C"] = np.einsum("btn,btl->nl", g_z * gate, Q)
            g_in = (g_z * cq) @ cell.B
        else:
            W = cell.W
            d = cell.state_dim
            chunk = max(1, (1 << 21) // (B * d * d))
            for start in reversed(range(0, h, chunk)):
                stop = min(h, start + chunk)
                M = np.einsum("ijl,btj->btil", W, inp[:, start:stop], optimize=True)
                for t in reversed(range(start, stop)):
                    g = g_ext[:, t] + g_q
                    qn = st[:, t + 1]
                    g_u = (g - qn * np.sum(qn * g, axis=1, keepdims=True)) / nrm[:, t, None]
                    G_u[:, t] = g_u
                    g_q = np.matmul(g_u[:, None, :], M[:, t - start])[:, 0]
            grads[f"layer{i}.W"] = np.einsum("bti,btj,btl->ijl", G_u, inp, Q, optimize=True)
            g_in = np.einsum("ijl,bti,btl->btj", W, G_u, Q, optimize=True)
        grads[f"layer{i}.b"] = G_u.sum(axis=(0, 1))
        if from_q1:
            grads[f"layer{i}.q1"] = g_q.sum(axis=0)
        g_ext = g_in

    enc = model.encoder
    if enc.kind == "onehot":
        gw = np.zeros_like(enc.weight.T)
        np.add.at(gw, enc_inputs.reshape(-1), g_ext.reshape(-1, g_ext.shape[-1]))
        grads["encoder.weight"] = gw.T
    else:
        grads["encoder.weight"] = np.einsum("bto,btd->od", g_ext, enc_inputs)
    grads["encoder.bias"] = g_ext.sum(axis=(0, 1))

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name, step)
    return loss, grads, trace


def batchify(corpus, n_streams: int) -> np.ndarray:
    """Cut a symbol corpus into ``n_streams`` contiguous streams of equal length."""
    corpus = np.asarray(corpus)
    L = corpus.shape[0] // n_streams
    if L < 2:
        raise EmptyData(f"corpus of {corpus.shape[0]} symbols is too short for {n_streams} streams")
    return corpus[: n_streams * L].reshape(n_streams, L)


def _windows(length: int, horizon: int):
    # (start, stop) of input positions; targets are shifted by one
    h = horizon if horizon > 0 else length - 1
    return [(s, min(s + h, length - 1)) for s in range(0, length - 1, h)]


def evaluate(model: PsrnnModel, sequences, guard: bool = True) -> dict:
    """Filter each sequence from ``q1`` and score one-step predictions.

    Symbol models report ``bpc`` and ``ospa``, vector models ``mse``.
    Also returns the underflow count and the largest deviation of any state
    norm from one.
    """
    outs, tgts = [], []
    underflows = 0
    norm_dev = 0.0
    for seq in sequences:
        seq = np.asarray(seq)
        if seq.shape[0] < 2:
            continue
        inputs = model.encoder.prepare(seq[:-1])[None]
        trace = run(model, inputs, [q[None] for q in model.q1], guard=guard)
        underflows += trace.underflows
        for s in trace.states:
            norm_dev = max(norm_dev, float(np.abs(np.linalg.norm(s[:, 1:], axis=-1) - 1.0).max()))
        outs.append(trace.outputs[0])
        tgts.append(seq[1:])
    if not outs:
        raise EmptyData("no sequence has two or more steps")
    out, tgt = np.concatenate(outs), np.concatenate(tgts)
    if model.kind == "discrete":
        metrics = {"bpc": loss_bpc(out, tgt), "ospa": metric_ospa(out, tgt)}
    else:
        metrics = {"mse": loss_mse(out, tgt.reshape(out.shape))}
    metrics.update({"underflows": underflows, "max_norm_error": norm_dev})
    return metrics


@dataclass
class TrainResult:
    model: PsrnnModel
    curves: list = field(default_factory=list)  # rows (epoch, split, metric, value)
    clip_events: int = 0
    underflows: int = 0
    steps: int = 0


def _record(curves, epoch, split, metrics):
    for name in ("bpc", "ospa", "mse"):
        if name in metrics:
            curves.append((epoch, split, name, metrics[name]))


def _global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def _sgd_step(model: PsrnnModel, grads, cfg: RunConfig, result: TrainResult, weight: float = 1.0):
    scale = cfg.lr * weight
    if cfg.grad_clip > 0:
        norm = _global_norm(grads)
        if norm > cfg.grad_clip:
            scale *= cfg.grad_clip / norm
            result.clip_events += 1
            log.info("step %d: gradient norm %.3g clipped to %.3g", result.steps, norm, cfg.grad_clip)
    params = model.parameters()
    for name, p in params.items():
        if name.endswith(".q1") and not cfg.train_q1:
            continue
        p -= scale * grads[name]
    if cfg.train_q1:
        for q in model.q1:
            q /= np.linalg.norm(q)
    result.steps += 1


def _epoch_discrete(model, streams, horizon, cfg, result):
    carried = None
    windows = _windows(streams.shape[1], horizon)
    full = windows[0][1] - windows[0][0]
    for start, stop in windows:
        x = streams[:, start:stop]
        y = streams[:, start + 1 : stop + 1]
        _, grads, trace = bptt_backward(model, x, y, carried, guard=True, step=result.steps)
        result.underflows += trace.underflows
        carried = [s.copy() for s in trace.final_states]
        # a short trailing window moves the parameters in proportion to its length
        _sgd_step(model, grads, cfg, result, (stop - start) / full)


def _epoch_continuous(model, sequences, horizon, cfg, result):
    for first in range(0, len(sequences), cfg.batch_size):
        group = sequences[first : first + cfg.batch_size]
        total = sum(s.shape[0] - 1 for s in group)
        acc = None
        # sequences differ in length, so each is unrolled alone and the
        # per-step mean over the group is rebuilt from weighted sums
        for seq in group:
            x = model.encoder.prepare(seq[:-1])[None]
            y = seq[1:][None]
            carried = None
            for start, stop in _windows(seq.shape[0], horizon):
                _, grads, trace = bptt_backward(
                    model, x[:, start:stop], y[:, start:stop], carried, guard=True, step=result.steps
                )
                result.underflows += trace.underflows
                carried = [s.copy() for s in trace.final_states]
                w = (stop - start) / total
                if acc is None:
                    acc = {k: w * g for k, g in grads.items()}
                else:
                    for k, g in grads.items():
                        acc[k] += w * g
        _sgd_step(model, acc, cfg, result)


def sgd_refine(model: PsrnnModel, train, test, cfg: RunConfig) -> TrainResult:
    """Refine ``model`` by plain SGD with truncated BPTT.

    Symbol data (``train`` a list of integer arrays, concatenated) is cut into
    ``cfg.batch_size`` parallel streams walked in contiguous windows of
    ``cfg.bptt_horizon`` steps with the state carried across windows. Vector
    data is processed ``cfg.batch_size`` sequences per step, each unrolled over
    its full length unless a horizon is set. Metrics on both splits are
    recorded before training (epoch 0) and after every epoch.
    """
    cfg = cfg.resolved(model.kind)
    result = TrainResult(model.copy())
    m = result.model
    train = [np.asarray(s) for s in train]
    test = [np.asarray(s) for s in test] if test is not None else []
    splits = [("train", train)] + ([("test", test)] if test else [])
    for split, seqs in splits:
        _record(result.curves, 0, split, evaluate(m, seqs))
    if m.kind == "discrete":
        streams = batchify(np.concatenate(train), cfg.batch_size)
    else:
        train_prepared = [s if s.ndim > 1 else s[:, None] for s in train]
    for epoch in range(1, cfg.epochs + 1):
        if m.kind == "discrete":
            _epoch_discrete(m, streams, cfg.bptt_horizon, cfg, result)
        else:
            _epoch_continuous(m, train_prepared, cfg.bptt_horizon, cfg, result)
        for split, seqs in splits:
            _record(result.curves, epoch, split, evaluate(m, seqs))
    if result.clip_events:
        log.warning("gradient clipping fired on %d of %d steps", result.clip_events, result.steps)
    return result


def write_curves(curves, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "metric", "value"])
        for epoch, split, metric, value in curves:
            w.writerow([epoch, split, metric, repr(float(value))])


@dataclass
class GradCheckReport:
    errors: dict  # parameter name -> max relative error over checked entries
    checked: dict  # parameter name -> number of checked entries
    threshold: float = 1e-5

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.threshold

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "threshold": self.threshold,
            "max_error": self.max_error,
            "groups": {k: {"max_rel_error": self.errors[k], "entries": self.checked[k]} for k in self.errors},
        }


def random_window(model: PsrnnModel, steps: int = 3, batch: int = 2, seed: int = 0):
    """Random inputs and targets of the right type for ``model``.

    Symbol inputs are drawn from the symbols the first cell responds to;
    a symbol never seen in training (the UNK id) has an all-zero slice and
    would stop the window at an underflow.
    """
    rng = np.random.default_rng(seed)
    enc = model.encoder
    n_in = enc.weight.shape[1]
    if enc.kind == "onehot":
        obs = enc.apply(np.arange(n_in))
        live = [i for i in range(n_in) if np.linalg.norm(model.layers[0].preactivation(model.q1[0], obs[i])) > 1e-8]
        x = rng.choice(np.asarray(live or range(n_in)), size=(batch, steps))
        y = rng.integers(0, model.decoder_bias.shape[0], size=(batch, steps))
    else:
        x = rng.normal(size=(batch, steps, n_in))
        y = rng.normal(size=(batch, steps, model.decoder_bias.shape[0]))
    return x, y


def _with_dtype(model: PsrnnModel, dtype) -> PsrnnModel:
    out = model.copy()
    enc = out.encoder
    enc.weight, enc.bias = enc.weight.astype(dtype), enc.bias.astype(dtype)
    for cell in out.layers:
        names = ("A", "B", "C", "b") if isinstance(cell, FactorizedCell) else ("W", "b")
        for n in names:
            setattr(cell, n, getattr(cell, n).astype(dtype))
    out.q1 = [q.astype(dtype) for q in out.q1]
    out.decoder_weight = out.decoder_weight.astype(dtype)
    out.decoder_bias = out.decoder_bias.astype(dtype)
    return out


def grad_check(
    model: PsrnnModel,
    seed: int = 0,
    steps: int = 3,
    batch: int = 2,
    eps: float = 1e-5,
    threshold: float = 1e-5,
    max_entries: int = 64,
    hook=None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences on a random window.

    The numeric derivative is the central difference at step ``eps``
    Richardson-extrapolated with the one at ``eps / 2``, which cancels the
    leading truncation term; without it, windows that pass through small
    preactivation norms show curvature errors well above the threshold. The
    perturbed losses are evaluated on an extended-precision copy of the
    model so that rounding in the forward pass does not swamp the
    differences of entries with small gradients (on platforms where
    ``np.longdouble`` is plain double this has no effect).
    At most ``max_entries`` entries per parameter are probed (chosen with
    ``seed``). The relative error of an entry is
    ``|a - n| / max(|a|, |n|, 1e-6)``, so entries whose gradient is below the
    finite-difference noise floor are judged on absolute error. ``hook``, if
    given, may rewrite the analytic gradients before the comparison.
    """
    m = model.copy()
    x, y = random_window(m, steps, batch, seed)
    _, grads, _ = bptt_backward(m, x, y, None, guard=False)
    if hook is not None:
        grads = hook(grads)
    rng = np.random.default_rng(seed + 1)
    errors, checked = {}, {}
    hi = _with_dtype(m, np.longdouble)
    for name, p in hi.parameters().items():
        flat = p.flat  # writes through for any memory layout
        idx = np.arange(p.size)
        if p.size > max_entries:
            idx = np.sort(rng.choice(p.size, max_entries, replace=False))
        worst = 0.0
        ga = grads[name].reshape(-1)

        def central(j, h):
            old = flat[j]
            flat[j] = old + h
            lp = window_loss(hi, x, y, guard=False)
            flat[j] = old - h
            lm = window_loss(hi, x, y, guard=False)
            flat[j] = old
            return (lp - lm) / (2 * h)

        for j in idx:
            num = float((4 * central(j, eps / 2) - central(j, eps)) / 3)
            worst = max(worst, abs(ga[j] - num) / max(abs(ga[j]), abs(num), 1e-6))
        errors[name] = float(worst)
        checked[name] = int(idx.size)
    return GradCheckReport(errors, checked, threshold)
