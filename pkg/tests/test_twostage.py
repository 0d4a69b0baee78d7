import warnings

import numpy as np
import pytest

from psrnn import oracle
from psrnn.config import RunConfig
from psrnn.errors import NormalizationUnderflow, RankWarning
from psrnn.features import OneHotEncoder, Triples, WindowSpec, build_triples
from psrnn.model import cell_update, full_norm_filter, PsrnnCell
from psrnn.regress import MomentAccumulator
from psrnn.tensor import contract_vec
from psrnn.train import evaluate
from psrnn.twostage import (
    estimate_layer,
    estimate_q1,
    estimate_W,
    estimate_Z,
    init_decoder,
    init_multilayer,
    moments,
    random_model,
    symbol_encoders,
)


def onehot_triples(seq, n_symbols, w=WindowSpec(1, 1)):
    enc = OneHotEncoder(n_symbols)
    return build_triples([seq], w, {"history": enc, "observation": enc, "future": enc})


def acc_from_phi(phis):
    phis = np.asarray(phis, dtype=float)
    n, d = phis.shape
    return MomentAccumulator().add_batch(phis, np.ones((n, 1)), np.ones((n, 1)), np.ones((n, 1)), phis)


def test_q1_examples():
    e = np.eye(2)
    q = estimate_q1(acc_from_phi([e[0], e[0], e[1]]))
    assert np.allclose(q, np.array([2.0, 1.0]) / np.sqrt(5.0), atol=1e-15)
    assert np.allclose(estimate_q1(acc_from_phi([[3.0, 4.0]])), [0.6, 0.8])
    assert np.allclose(estimate_q1(acc_from_phi([e[0], e[1]]), normalize=False), [0.5, 0.5])
    with pytest.raises(NormalizationUnderflow):
        estimate_q1(acc_from_phi(np.zeros((3, 2))))


def test_one_state_system_fixed_point():
    n = 50
    e1 = np.tile([1.0, 0.0], (n, 1))
    t = Triples(e1, e1, e1, np.r_[np.ones(n - 1, bool), False], np.column_stack([np.zeros(n), np.arange(n)]))
    acc_w, _ = moments(t)
    W = estimate_W(acc_w, 0.0)
    q = estimate_q1(acc_w)
    out = contract_vec(W, 3, q) @ np.array([1.0, 0.0])
    assert np.allclose(out / np.linalg.norm(out), [1.0, 0.0], atol=1e-12)


def test_cycle_hmm_matches_exact_filter():
    spec = oracle.cycle_spec(2, noise=0.1)
    train = oracle.sample(spec, 10_000, seed=0)
    test = oracle.sample(spec, 2_000, seed=1)
    acc_w, acc_z = moments(onehot_triples(train, 2))
    W, Z = estimate_W(acc_w, 0.0), estimate_Z(acc_z, 0.0)
    states = full_norm_filter(W, Z, acc_w.sum1 / acc_w.count, np.eye(2)[test])
    exact = oracle.forward_filter(spec, test).predictive
    tv = 0.5 * np.abs(states[1:-1] - exact[:-1]).sum(axis=1).mean()
    assert tv <= 0.02


def test_rank_warning_when_data_is_scarce(rng):
    phis = rng.normal(size=(3, 6))
    acc = MomentAccumulator().add_batch(phis, np.ones((3, 1)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), phis)
    with pytest.warns(RankWarning):
        estimate_W(acc, 0.0)


def test_Z_is_diagonal_for_indicators(hmm_spec):
    seq = oracle.sample(hmm_spec, 5000, seed=3)
    t = onehot_triples(seq, 4)
    acc_w, acc_z = moments(t)
    Z = estimate_Z(acc_z, 0.0)
    assert Z.shape == (4, 4, 4)
    q = estimate_q1(acc_w, normalize=False)
    for qt in (q, t.phi[10], t.phi[200]):
        N = contract_vec(Z, 3, qt)
        off = np.abs(N - np.diag(np.diag(N))).sum()
        assert off <= 0.05 * abs(np.trace(N))


def test_Z_single_symbol():
    seq = np.zeros(100, dtype=int)
    acc_w, acc_z = moments(onehot_triples(seq, 1))
    Z = estimate_Z(acc_z, 0.0)
    q = estimate_q1(acc_w)
    assert contract_vec(Z, 3, q) == pytest.approx(np.array([[1.0]]), abs=1e-6)
    W = estimate_W(acc_w, 0.0)
    states = full_norm_filter(W, Z, q, np.ones((5, 1)))
    assert np.allclose(states, 1.0)


def test_decoder_identity_and_constant(rng):
    X = rng.normal(size=(500, 3))
    w, b, res = init_decoder(X, X, lam=1e-6)
    assert np.allclose(w, np.eye(3), atol=1e-6) and np.allclose(b, 0, atol=1e-6)
    assert res <= 1e-12
    y = np.full((500, 2), 3.5)
    w, b, _ = init_decoder(X, y, lam=1e-3)
    assert np.allclose(w, 0, atol=1e-12) and np.allclose(b, 3.5)


def test_decoder_bpc_near_exact_filter(hmm_spec):
    train = oracle.sample(hmm_spec, 100_000, seed=1)
    test = oracle.sample(hmm_spec, 5_000, seed=999)
    model, _ = init_multilayer([train], "discrete", RunConfig(states=3), n_symbols=4)
    assert abs(evaluate(model, [test])["bpc"] - oracle.forward_filter(hmm_spec, test).bpc) <= 0.1


def test_single_layer_is_plain_2sr(hmm_corpus):
    train, _ = hmm_corpus
    cfg = RunConfig(states=3, seed=0)
    model, report = init_multilayer([train], "discrete", cfg, n_symbols=4)
    enc, _ = symbol_encoders(4, WindowSpec(1, 1), cfg.resolved("discrete"), [train])
    est = estimate_layer(build_triples([train], WindowSpec(1, 1), enc), cfg.ridge, cfg.ridge_mode,
                         cfg.state_const, rank=3)
    assert model.n_layers == 1
    assert np.allclose(model.layers[0].W * report.extra["w_scale"][0], est.W, rtol=1e-12, atol=1e-14)
    assert np.allclose(model.q1[0], est.q1 / np.linalg.norm(est.q1))
    assert not model.layers[0].b.any()


def test_two_layer_shapes(hmm_corpus):
    train, _ = hmm_corpus
    model, report = init_multilayer([train[:5000]], "discrete", RunConfig(states=3, layers=2), n_symbols=4)
    assert model.n_layers == 2
    assert model.layers[1].input_dim == model.layers[0].state_dim
    assert len(report.to_dict()["layers"]) == 2
    assert all(np.isfinite(r["W"]) and r["W"] >= 0 for r in report.residuals)


def test_scale_invariance_on_pinv_path(rng):
    spec = oracle.random_spec(2, 3, seed=5)
    seq = oracle.sample(spec, 4000, seed=2)
    t = onehot_triples(seq, 3)
    scaled = Triples(t.eta, t.omega, 7.5 * t.phi, t.has_next, t.positions)

    def trajectory(triples):
        est = estimate_layer(triples, 0.0, "pinv", const=None)
        cell = PsrnnCell(est.W, np.zeros(est.W.shape[0]))
        q = est.q1 / np.linalg.norm(est.q1)
        out = [q]
        for o in triples.omega[:300]:
            q = cell_update(cell, q, o)
            out.append(q)
        return np.array(out)

    assert np.allclose(trajectory(t), trajectory(scaled), atol=1e-8, rtol=0)


def test_determinism(hmm_corpus):
    train, _ = hmm_corpus
    cfg = RunConfig(states=3, seed=2)
    a, _ = init_multilayer([train[:4000]], "discrete", cfg, n_symbols=4)
    b, _ = init_multilayer([train[:4000]], "discrete", cfg, n_symbols=4)
    for (k, x), y in zip(a.parameters().items(), b.parameters().values()):
        assert x.tobytes() == y.tobytes(), k
    t = onehot_triples(train[:4000], 4)
    za = estimate_layer(t, 1e-2, const=1.0).Z
    zb = estimate_layer(t, 1e-2, const=1.0).Z
    assert za.tobytes() == zb.tobytes()


def test_continuous_init_runs(rng):
    seqs = [np.cumsum(rng.normal(size=(80, 2)), axis=0) for _ in range(3)]
    cfg = RunConfig(states=4, rff_count=100, seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model, report = init_multilayer(seqs, "continuous", cfg)
    assert model.encoder.kind == "rff"
    assert model.decoder_bias.shape == (2,)
    assert report.dims["future_len"] == 10
    assert np.isfinite(evaluate(model, seqs)["mse"])


def test_random_model_keeps_architecture(hmm_corpus):
    train, _ = hmm_corpus
    model, _ = init_multilayer([train[:3000]], "discrete", RunConfig(states=3), n_symbols=4)
    r = random_model(model, seed=1)
    for (k, a), b in zip(model.parameters().items(), r.parameters().values()):
        assert a.shape == b.shape, k
    assert r.metadata["init"] == "random"
    assert all(abs(np.linalg.norm(q) - 1) < 1e-12 for q in r.q1)
    assert not np.array_equal(r.layers[0].W, model.layers[0].W)
