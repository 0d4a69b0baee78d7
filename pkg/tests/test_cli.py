import json

import numpy as np
import pytest

from psrnn import cli
from psrnn.io import load_model, model_from_bytes, model_to_bytes, save_model
from psrnn.errors import ModelFormatError


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps({"states": 3, "epochs": 1, "batch_size": 4}))
    assert cli.main(["synth-hmm", "--out", str(d / "c.txt"), "--length", "6000", "--seed", "0"]) == 0
    assert cli.main(["init", "--data", str(d / "c.txt"), "--config", str(d / "cfg.json"),
                     "--out", str(d / "m.bin"), "--hmm", str(d / "c.txt.hmm.json")]) == 0
    return d


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_synth_is_seeded(tmp_path):
    for name in ("a", "b"):
        assert run("synth-hmm", "--out", tmp_path / name, "--length", 500, "--seed", 4) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert (tmp_path / "a.hmm.json").read_bytes() == (tmp_path / "b.hmm.json").read_bytes()
    assert set((tmp_path / "a").read_bytes()) <= set(b"abcd")


def test_init_report_has_oracle_comparison(workdir):
    rep = json.loads((workdir / "m.bin.report.json").read_text())
    assert 0 <= rep["tv_distance"] <= 1
    assert rep["test"]["underflows"] == 0
    assert rep["oracle_bpc"] <= rep["test"]["bpc"] + 0.1
    assert len(rep["layers"]) == 1


def test_two_layer_report(workdir, tmp_path):
    assert run("init", "--data", workdir / "c.txt", "--config", workdir / "cfg.json", "--layers", 2,
               "--out", tmp_path / "m2.bin") == 0
    assert len(json.loads((tmp_path / "m2.bin.report.json").read_text())["layers"]) == 2
    assert load_model(tmp_path / "m2.bin").n_layers == 2


def test_missing_data_and_bad_config(workdir, tmp_path):
    assert run("init", "--data", tmp_path / "absent.txt", "--out", tmp_path / "m") == 30
    assert run("init", "--out", tmp_path / "m") == 41
    bad = tmp_path / "bad.json"
    bad.write_text('{"states": -1}')
    assert run("init", "--data", workdir / "c.txt", "--config", bad, "--out", tmp_path / "m") == 41
    assert run("init", "--data", workdir / "c.txt", "--config", tmp_path / "nope.json", "--out", tmp_path / "m") == 30


def test_zero_epochs_leave_model_bytes(workdir, tmp_path):
    assert run("train", "--data", workdir / "c.txt", "--config", workdir / "cfg.json", "--model", workdir / "m.bin",
               "--epochs", 0, "--out", tmp_path / "t.bin") == 0
    assert (tmp_path / "t.bin").read_bytes() == (workdir / "m.bin").read_bytes()


def test_seeded_training_is_reproducible(workdir, tmp_path):
    for name in ("a", "b"):
        assert run("train", "--data", workdir / "c.txt", "--config", workdir / "cfg.json", "--model",
                   workdir / "m.bin", "--seed", 5, "--out", tmp_path / name) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert (tmp_path / "a.curves.csv").read_bytes() == (tmp_path / "b.curves.csv").read_bytes()
    assert load_model(tmp_path / "a").metadata["refined_epochs"] == 1


def test_random_init_pairs_with_spectral(workdir, tmp_path):
    assert run("init", "--data", workdir / "c.txt", "--config", workdir / "cfg.json", "--random-init",
               "--out", tmp_path / "r.bin") == 0
    r, m = load_model(tmp_path / "r.bin"), load_model(workdir / "m.bin")
    assert r.metadata["init"] == "random"
    for (k, a), b in zip(r.parameters().items(), m.parameters().values()):
        assert a.shape == b.shape, k


def test_factorize_sweep(workdir, tmp_path):
    assert run("factorize", "--data", workdir / "c.txt", "--config", workdir / "cfg.json", "--model",
               workdir / "m.bin", "--rank", "1,2", "--out", tmp_path / "f") == 0
    rep = json.loads((tmp_path / "f.report.json").read_text())
    assert [r["rank"] for r in rep] == [1, 2]
    for r in rep:
        fm = load_model(r["path"])
        assert fm.factorized and fm.metadata["eps_bias"] == 0.1
        assert np.isfinite(r["divergence"])
    assert run("factorize", "--data", workdir / "c.txt", "--model", workdir / "m.bin", "--rank", "x",
               "--out", tmp_path / "g") == 41


def test_factorize_at_full_rank_reproduces_filter(workdir, tmp_path):
    # a d x d_o x d tensor has CP rank at most d * d_o
    m = load_model(workdir / "m.bin")
    full = m.layers[0].state_dim * m.layers[0].input_dim
    assert run("factorize", "--data", workdir / "c.txt", "--model", workdir / "m.bin", "--rank", full,
               "--out", tmp_path / "f") == 0
    rep = json.loads((tmp_path / "f.report.json").read_text())
    assert rep[0]["cp_divergence"] <= 1e-4


def test_eval_discrete_and_continuous(workdir, tmp_path, rng):
    out = tmp_path / "e.json"
    assert run("eval", "--data", workdir / "c.txt", "--model", workdir / "m.bin", "--hmm", workdir / "c.txt.hmm.json",
               "--out", out) == 0
    res = json.loads(out.read_text())
    assert {"bpc", "ospa"} <= set(res["test"]) and "mse" not in res["test"]
    assert "oracle_bpc" in res

    traj = tmp_path / "traj"
    traj.mkdir()
    for i in range(3):
        rows = np.cumsum(rng.normal(size=(60, 2)), axis=0)
        (traj / f"{i}.csv").write_text("\n".join(f"{a:.6f},{b:.6f}" for a, b in rows) + "\n")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"states": 3, "rff_count": 50, "future_len": 2, "split": 2}))
    assert run("init", "--data", traj, "--config", cfg, "--out", tmp_path / "cm") == 0
    assert run("eval", "--data", traj, "--config", cfg, "--model", tmp_path / "cm", "--out", out) == 0
    res = json.loads(out.read_text())
    assert set(res["test"]) == {"mse", "underflows", "max_norm_error"}


def test_malformed_model(workdir, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"PSRN garbage")
    assert run("eval", "--data", workdir / "c.txt", "--model", bad) == 40


def test_gradcheck_exit_codes(workdir, tmp_path, monkeypatch):
    assert run("gradcheck", "--model", workdir / "m.bin", "--out", tmp_path / "g.json") == 0
    assert json.loads((tmp_path / "g.json").read_text())["passed"] is True

    real = cli.grad_check

    def broken(model, seed=0):
        def flip(grads):
            return {k: -v for k, v in grads.items()}
        return real(model, seed=seed, hook=flip)

    monkeypatch.setattr(cli, "grad_check", broken)
    assert run("gradcheck", "--model", workdir / "m.bin", "--out", tmp_path / "g.json") == cli.GRADCHECK_FAILED


def test_model_file_round_trip_and_corruption(workdir, tmp_path):
    buf = (workdir / "m.bin").read_bytes()
    m = model_from_bytes(buf)
    assert model_to_bytes(m) == buf
    save_model(m, tmp_path / "copy.bin")
    assert (tmp_path / "copy.bin").read_bytes() == buf
    with pytest.raises(ModelFormatError):
        model_from_bytes(buf[:-3])
    with pytest.raises(ModelFormatError):
        model_from_bytes(buf + b"\0")
    with pytest.raises(ModelFormatError):
        model_from_bytes(b"XXXX" + buf[4:])
    bumped = buf[:4] + (2).to_bytes(4, "little") + buf[8:]
    with pytest.raises(ModelFormatError):
        model_from_bytes(bumped)


def test_dump_config(capsys, workdir):
    assert run("init", "--config", workdir / "cfg.json", "--dump-config") == 0
    assert json.loads(capsys.readouterr().out)["states"] == 3
