"""Command-line entry point: ``psrnn {init,train,factorize,eval,synth-hmm,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import oracle
from .config import RunConfig, load_config
from .data import Dataset, load_data, symbols_to_text
from .errors import ConfigError, IoError, PsrnnError
from .io import load_model, save_model
from .model import PsrnnModel, factorize_model, filter as run_filter
from .train import evaluate, grad_check, sgd_refine, write_curves
from .twostage import init_multilayer, random_model

log = logging.getLogger("psrnn")

GRADCHECK_FAILED = 3


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _config(args) -> RunConfig:
    overrides = {
        "seed": args.seed,
        "layers": getattr(args, "layers", None),
        "rank": _single_rank(getattr(args, "rank", None)),
        "epochs": getattr(args, "epochs", None),
    }
    if getattr(args, "random_init", False):
        overrides["random_init"] = True
    return load_config(args.config, **overrides)


def _single_rank(text):
    # a comma-separated sweep is handled by the factorize command itself
    if text is None or "," in str(text):
        return None
    try:
        return int(text)
    except ValueError as exc:
        raise ConfigError(f"bad --rank {text!r}") from exc


def _dataset(args, cfg: RunConfig) -> Dataset:
    if not args.data:
        raise ConfigError("--data is required")
    if Path(args.data).suffix == ".json" and Path(args.data).with_suffix(".npz").exists():
        return Dataset.load(Path(args.data).with_suffix(""))
    try:
        return load_data(args.data, cfg.split)
    except ValueError as exc:
        if isinstance(exc, PsrnnError):
            raise
        raise ConfigError(str(exc)) from exc


def _require(path, what):
    if not path:
        raise ConfigError(f"--{what} is required")
    return path


def _softmax(logits):
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def hmm_comparison(model: PsrnnModel, ds: Dataset, spec: oracle.HmmSpec) -> dict:
    """Exact-filter scores on the test text and the model's TV distance to it.

    Corpus bytes ``a, b, ...`` are HMM symbols ``0, 1, ...``; the model's
    distribution is restricted to those symbols and renormalized.
    """
    if ds.kind != "discrete":
        raise ConfigError("an HMM comparison needs a character corpus")
    seqs = ds.test or ds.train
    seq = seqs[0]
    byte_of = np.append(np.asarray(ds.alphabet), -1)
    hmm_seq = byte_of[seq] - ord("a")
    if np.any(hmm_seq < 0) or np.any(hmm_seq >= spec.n_symbols):
        raise ConfigError("corpus contains bytes outside the HMM alphabet")
    exact = oracle.forward_filter(spec, hmm_seq)
    probs = _softmax(run_filter(model, seq, guard=True).predictions)
    cols = np.full(spec.n_symbols, -1)
    for i, b in enumerate(ds.alphabet):
        if 0 <= b - ord("a") < spec.n_symbols:
            cols[b - ord("a")] = i
    p = np.where(cols >= 0, probs[:, np.maximum(cols, 0)], 0.0)
    p /= p.sum(axis=1, keepdims=True)
    tv = 0.5 * np.abs(p[:-1] - exact.predictive[:-1]).sum(axis=1).mean()
    return {"oracle_bpc": exact.bpc, "oracle_ospa": exact.ospa, "tv_distance": float(tv)}


def cmd_init(args) -> int:
    cfg = _config(args)
    ds = _dataset(args, cfg)
    out = _require(args.out, "out")
    model, report = init_multilayer(ds.train, ds.kind, cfg, ds.n_symbols)
    if cfg.random_init:
        model = random_model(model, cfg.seed, cfg.init_scale)
    model.metadata.update({"alphabet": ds.alphabet, "dataset": ds.manifest})
    save_model(model, out)
    rep = report.to_dict()
    rep["config"] = cfg.to_dict()
    if ds.test:
        rep["test"] = evaluate(model, ds.test)
    if args.hmm:
        rep.update(hmm_comparison(model, ds, oracle.HmmSpec.load(args.hmm)))
    _dump(rep, args.report or f"{out}.report.json")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = _dataset(args, cfg)
    model = load_model(_require(args.model, "model"))
    out = _require(args.out, "out")
    result = sgd_refine(model, ds.train, ds.test, cfg)
    if cfg.epochs > 0:
        result.model.metadata = dict(result.model.metadata, refined_epochs=int(cfg.epochs), lr=float(cfg.lr))
    save_model(result.model, out)
    write_curves(result.curves, args.curves or f"{out}.curves.csv")
    _dump({"steps": result.steps, "clip_events": result.clip_events, "underflows": result.underflows,
           "curves": [list(r) for r in result.curves]}, args.report or f"{out}.report.json")
    return 0


def _ranks(text) -> list:
    try:
        ranks = [int(r) for r in str(text).split(",") if r.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --rank {text!r}") from exc
    if not ranks or min(ranks) < 1:
        raise ConfigError("--rank needs positive integers")
    return ranks


def _divergence(a: PsrnnModel, b: PsrnnModel, seqs, limit: int = 2000) -> float:
    worst = 0.0
    for s in seqs:
        s = s[:limit]
        worst = max(worst, float(np.abs(run_filter(a, s, True).predictions - run_filter(b, s, True).predictions).max()))
    return worst


def cmd_factorize(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    model = load_model(_require(args.model, "model"))
    ds = _dataset(args, cfg)
    out = _require(args.out, "out")
    ranks = _ranks(args.rank if args.rank is not None else cfg.rank)
    reports = []
    for r in ranks:
        fm = factorize_model(model, r, cfg.eps_bias, ds.train, seed=cfg.seed)
        plain = factorize_model(model, r, cfg.eps_bias, seed=cfg.seed, override_bias=False)
        path = out if len(ranks) == 1 else f"{out}.rank{r}"
        save_model(fm, path)
        reports.append({
            "rank": r,
            "path": path,
            "eps_bias": cfg.eps_bias,
            "cp_relative_error": fm.metadata["cp_relative_error"],
            "divergence": _divergence(model, fm, ds.train),
            "cp_divergence": _divergence(model, plain, ds.train),
        })
    _dump(reports, args.report or f"{out}.report.json")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = load_model(_require(args.model, "model"))
    ds = _dataset(args, cfg)
    res = {"kind": model.kind}
    for split, seqs in (("train", ds.train), ("test", ds.test)):
        if seqs:
            res[split] = evaluate(model, seqs)
    if args.hmm:
        res.update(hmm_comparison(model, ds, oracle.HmmSpec.load(args.hmm)))
    _dump(res, args.out)
    return 0


def cmd_synth(args) -> int:
    out = _require(args.out, "out")
    seed = args.seed if args.seed is not None else 0
    if args.spec:
        spec = oracle.HmmSpec.load(args.spec)
    else:
        spec = oracle.random_spec(args.n_states, args.n_symbols, seed=seed)
    seq = oracle.sample(spec, args.length, seed=seed)
    try:
        Path(out).write_bytes(symbols_to_text(seq))
    except OSError as exc:
        raise IoError(f"cannot write {out}: {exc}") from exc
    spec.save(args.hmm or f"{out}.hmm.json")
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    model = load_model(_require(args.model, "model"))
    report = grad_check(model, seed=seed)
    _dump(report.to_dict(), args.out)
    return 0 if report.passed else GRADCHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psrnn", description="Predictive state RNNs: init, refine, factorize, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, model=False):
        sp.add_argument("--config", help="JSON file of run settings")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output path")
        sp.add_argument("--report", help="where to write the JSON report (default: <out>.report.json)")
        sp.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
        if data:
            sp.add_argument("--data", help="text corpus, CSV file/glob/directory, or a saved dataset")
        if model:
            sp.add_argument("--model", help="input model file")

    sp = sub.add_parser("init", help="initialize a model by two-stage regression")
    common(sp)
    sp.add_argument("--layers", type=int)
    sp.add_argument("--random-init", action="store_true")
    sp.add_argument("--hmm", help="HMM spec JSON; adds exact-filter scores and TV distance to the report")
    sp.set_defaults(func=cmd_init)

    sp = sub.add_parser("train", help="refine a model with truncated BPTT")
    common(sp, model=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--curves", help="learning-curve CSV (default: <out>.curves.csv)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("factorize", help="replace full cells by CP factors")
    common(sp, model=True)
    sp.add_argument("--rank", help="rank, or comma-separated ranks for a sweep")
    sp.set_defaults(func=cmd_factorize)

    sp = sub.add_parser("eval", help="score a model on a dataset")
    common(sp, model=True)
    sp.add_argument("--hmm", help="HMM spec JSON for exact-filter comparison")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("synth-hmm", help="sample a corpus from a random or given HMM")
    common(sp, data=False)
    sp.add_argument("--hmm", help="where to write the spec (default: <out>.hmm.json)")
    sp.add_argument("--spec", help="sample from this spec instead of drawing one")
    sp.add_argument("--n-states", type=int, default=3)
    sp.add_argument("--n-symbols", type=int, default=4)
    sp.add_argument("--length", type=int, default=100_000)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the BPTT gradients")
    common(sp, data=False, model=True)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.dump_config:
            sys.stdout.write(_config(args).to_json() + "\n")
            return 0
        return args.func(args)
    except PsrnnError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
