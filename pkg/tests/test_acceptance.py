"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that the conftest hook prints in a
separate "acceptance criteria" section at the end of the run. Expensive
runs are module-scoped fixtures so the norm audit can reuse them.
"""

import time

import numpy as np
import pytest

from conftest import record_acceptance
from psrnn import oracle
from psrnn.config import RunConfig
from psrnn.features import OneHotEncoder, WindowSpec, build_triples
from psrnn.io import model_from_bytes, model_to_bytes
from psrnn.model import (
    FactorizedCell,
    cell_update,
    factorize_model,
    factorized_update,
    full_norm_filter,
    reconstruct_cell,
)
from psrnn.tensor import CpFactors, contract_vec, cp_als, cp_reconstruct, mode_mat_product, relative_error
from psrnn.train import evaluate, grad_check, sgd_refine
from psrnn.twostage import estimate_W, estimate_Z, init_multilayer, moments, random_model
from test_tensor import loop_contract, loop_mode_product

SEEDS = (0, 1, 2)
RANKS = (2, 5, 10, 20)
CFG = RunConfig(states=3)


def bpc_curve(result, split="test"):
    return [v for _, s, k, v in result.curves if s == split and k == "bpc"]


def corpus(spec, seed):
    seq = oracle.sample(spec, 25_000, seed=seed)
    return seq[:20_000], seq[20_000:]


# criterion 1 ---------------------------------------------------------------

def test_criterion_01_tensor_oracle():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        d = tuple(rng.integers(1, 6, size=3))
        T = rng.normal(size=d)
        for mode in (1, 2, 3):
            v = rng.normal(size=d[mode - 1])
            M = rng.normal(size=(int(rng.integers(1, 6)), d[mode - 1]))
            worst = max(worst, np.abs(contract_vec(T, mode, v) - loop_contract(T, mode, v)).max(),
                        np.abs(mode_mat_product(T, mode, M) - loop_mode_product(T, mode, M)).max())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 5
    record_acceptance(1, ok, f"max abs error {worst:.1e} over 200 instances, {elapsed:.2f} s")
    assert ok


# criterion 2 ---------------------------------------------------------------

def test_criterion_02_cp_recovery():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    errors = []
    for i in range(20):
        r = 1 + i % 5
        d = rng.integers(2, 11, size=3)
        F = CpFactors(*(rng.normal(size=(r, k)) for k in d))
        T = cp_reconstruct(F)
        errors.append(relative_error(T, cp_als(T, r, seed=i)))
    elapsed = time.perf_counter() - t0
    ok = max(errors) <= 1e-6 and elapsed < 30
    record_acceptance(2, ok, f"worst relative error {max(errors):.1e} over 20 tensors, {elapsed:.1f} s")
    assert ok


# criterion 3 ---------------------------------------------------------------

def test_criterion_03_mi_identity():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        n, d_q, d_o = rng.integers(1, 8, size=3)
        fc = FactorizedCell(rng.normal(size=(n, d_q)), rng.normal(size=(n, d_o)), rng.normal(size=(n, d_q)),
                            rng.normal(size=d_q))
        full = reconstruct_cell(fc)
        q, o = rng.normal(size=d_q), rng.normal(size=d_o)
        worst = max(worst, np.abs(fc.preactivation(q, o) - full.preactivation(q, o)).max(),
                    np.abs(factorized_update(fc, q, o) - cell_update(full, q, o)).max())
    ok = worst <= 1e-10
    record_acceptance(3, ok, f"max abs difference {worst:.1e} over 100 draws")
    assert ok


# criterion 4 ---------------------------------------------------------------

def test_criterion_04_gradients(hmm_corpus):
    train, _ = hmm_corpus
    t0 = time.perf_counter()
    results = {}
    for layers in (1, 2):
        model, _ = init_multilayer([train[:3000]], "discrete", RunConfig(states=3, layers=layers), n_symbols=4)
        for variant in ("full", "factorized"):
            m = model if variant == "full" else factorize_model(model, 3, train_sequences=[train[:1000]])
            results[variant, layers] = grad_check(m, seed=layers, steps=3)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_error for r in results.values())
    ok = all(r.passed for r in results.values()) and elapsed < 60
    record_acceptance(4, ok, f"worst relative error {worst:.1e} over full/factorized x 1/2 layers, {elapsed:.1f} s")
    assert ok, {k: r.to_dict() for k, r in results.items()}


# criterion 5 ---------------------------------------------------------------

def _simplex(p):
    p = np.clip(p, 0.0, None)
    s = p.sum(axis=1, keepdims=True)
    return np.where(s > 0, p / np.where(s > 0, s, 1.0), 1.0 / p.shape[1])


@pytest.fixture(scope="module")
def consistency(hmm_spec):
    t0 = time.perf_counter()
    test = oracle.sample(hmm_spec, 5_000, seed=999)
    exact = oracle.forward_filter(hmm_spec, test)
    full = oracle.sample(hmm_spec, 100_000, seed=1)
    onehot = OneHotEncoder(4)
    enc = {"history": onehot, "observation": onehot, "future": onehot}
    tv = {}
    for T in (1_000, 10_000, 100_000):
        acc_w, acc_z = moments(build_triples([full[:T]], WindowSpec(1, 1), enc))
        W, Z = estimate_W(acc_w, 0.0, rank=3), estimate_Z(acc_z, 0.0, rank=3)
        states = full_norm_filter(W, Z, acc_w.sum1 / acc_w.count, np.eye(4)[test])
        tv[T] = float(0.5 * np.abs(_simplex(states[1:-1]) - exact.predictive[:-1]).sum(axis=1).mean())
    model, _ = init_multilayer([full], "discrete", CFG, n_symbols=4)
    metrics = evaluate(model, [test])
    return {"tv": tv, "metrics": metrics, "exact": exact, "model": model, "seqs": [full, test],
            "elapsed": time.perf_counter() - t0}


def test_criterion_05_consistency(consistency):
    tv = consistency["tv"]
    ospa, exact_ospa = consistency["metrics"]["ospa"], consistency["exact"].ospa
    decreasing = tv[1_000] > tv[10_000] > tv[100_000]
    ok = decreasing and tv[100_000] <= 0.05 and abs(ospa - exact_ospa) <= 0.02 and consistency["elapsed"] < 600
    tvs = " / ".join(f"{v:.4f}" for v in tv.values())
    record_acceptance(5, ok, f"TV {tvs} at T=1e3/1e4/1e5; OSPA {ospa:.4f} vs exact {exact_ospa:.4f}")
    assert ok


# criterion 6 ---------------------------------------------------------------

@pytest.fixture(scope="module")
def init_comparison(hmm_spec):
    runs = []
    for seed in SEEDS:
        train, test = corpus(hmm_spec, seed)
        cfg = RunConfig(states=3, seed=seed)
        model, _ = init_multilayer([train], "discrete", cfg, n_symbols=4)
        spectral = sgd_refine(model, [train], [test], cfg)
        rand = sgd_refine(random_model(model, seed=seed, scale=cfg.init_scale), [train], [test], cfg)
        runs.append((seed, spectral, rand, [train, test]))
    return runs


def test_criterion_06_initialization_value(init_comparison):
    wins, never_degrades, parts = 0, True, []
    for seed, spectral, rand, _ in init_comparison:
        a, b = bpc_curve(spectral)[-1], bpc_curve(rand)[-1]
        wins += a < b
        tr = bpc_curve(spectral, "train")
        never_degrades &= tr[-1] <= tr[0]
        parts.append(f"{a:.4f}<{b:.4f}" if a < b else f"{a:.4f}>={b:.4f}")
    ok = wins >= 2 and never_degrades
    record_acceptance(6, ok, f"2SR vs random test BPC {', '.join(parts)}; train never degrades: {never_degrades}")
    assert ok


# criterion 7 ---------------------------------------------------------------

@pytest.fixture(scope="module")
def depth_comparison(hmm_corpus, init_comparison):
    train, test = hmm_corpus
    one = next(r for r in init_comparison if r[0] == 0)[1]
    cfg = RunConfig(states=3, layers=2, seed=0)
    model, _ = init_multilayer([train], "discrete", cfg, n_symbols=4)
    return one, sgd_refine(model, [train], [test], cfg)


def test_criterion_07_two_layers(depth_comparison):
    one, two = (bpc_curve(r)[-1] for r in depth_comparison)
    ok = two <= one + 0.05
    record_acceptance(7, ok, f"2-layer {two:.4f} vs 1-layer {one:.4f} test BPC after 5 epochs")
    assert ok


# criterion 8 ---------------------------------------------------------------

@pytest.fixture(scope="module")
def rank_sweep(hmm_corpus, init_comparison):
    train, test = hmm_corpus
    full = next(r for r in init_comparison if r[0] == 0)[1]
    base, _ = init_multilayer([train], "discrete", RunConfig(states=3, seed=0), n_symbols=4)
    runs = {}
    for r in RANKS:
        fm = factorize_model(base, r, CFG.eps_bias, [train], seed=0)
        runs[r] = sgd_refine(fm, [train], [test], RunConfig(states=3, seed=0))
    return full, runs


def test_criterion_08_rank_sweep(rank_sweep):
    full, runs = rank_sweep
    bpc = [bpc_curve(runs[r])[-1] for r in RANKS]
    full_bpc = bpc_curve(full)[-1]
    monotone = all(b <= a + 0.05 for a, b in zip(bpc, bpc[1:]))
    ok = monotone and all(full_bpc <= b + 0.05 for b in bpc)
    sweep = ", ".join(f"r{r} {b:.4f}" for r, b in zip(RANKS, bpc))
    record_acceptance(8, ok, f"{sweep}; full {full_bpc:.4f}")
    assert ok


# criterion 9 ---------------------------------------------------------------

def test_criterion_09_unit_norm_states(consistency, init_comparison, depth_comparison, rank_sweep):
    audited = [(consistency["model"], consistency["seqs"], 0)]
    for _, spectral, rand, seqs in init_comparison:
        audited += [(spectral.model, seqs, spectral.underflows), (rand.model, seqs, rand.underflows)]
    seqs0 = init_comparison[0][3]
    audited.append((depth_comparison[1].model, seqs0, depth_comparison[1].underflows))
    audited += [(r.model, seqs0, r.underflows) for r in rank_sweep[1].values()]
    worst, underflows = 0.0, 0
    for model, seqs, during_training in audited:
        m = evaluate(model, seqs)
        worst = max(worst, m["max_norm_error"])
        underflows += m["underflows"] + during_training
    ok = worst <= 1e-12 and underflows == 0
    record_acceptance(9, ok, f"{len(audited)} models: max | |q| - 1 | {worst:.1e}, underflows {underflows}")
    assert ok


# criterion 10 --------------------------------------------------------------

def test_criterion_10_determinism(hmm_corpus, tmp_path):
    train, test = hmm_corpus
    cfg = RunConfig(states=3, layers=2, epochs=1, seed=7)
    blobs = []
    for _ in range(2):
        model, _ = init_multilayer([train[:5000]], "discrete", cfg, n_symbols=4)
        refined = sgd_refine(model, [train[:5000]], [test[:1000]], cfg).model
        fm = factorize_model(refined, 4, train_sequences=[train[:1000]], seed=cfg.seed)
        blobs.append([model_to_bytes(m) for m in (model, refined, fm)])
    repeat = blobs[0] == blobs[1]
    round_trip = all(model_to_bytes(model_from_bytes(b)) == b for b in blobs[0])
    ok = repeat and round_trip
    record_acceptance(10, ok, f"repeated runs identical: {repeat}; save/load identical: {round_trip}")
    assert ok
