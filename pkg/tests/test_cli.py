import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from rfqsrr.cli import main
from rfqsrr.data import Dataset, load_csv, write_csv


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def planted(tmp_path):
    path = tmp_path / "d.csv"
    assert _run("generate", "--n", 60, "--p", 10, "--k-linear", 2, "--k-nonlinear", 2,
                "--noise-sd", 0.2, "--seed", 3, "--out", path, "-q") == 0
    return path


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ------------------------------------------------------------------ generate

def test_generate_wide_shape_and_rerun(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert _run("generate", "--n", 250, "--p", 1667, "--k-linear", 10, "--k-nonlinear", 5,
                    "--seed", 7, "--out", out, "-q") == 0
    rows = _read_csv(a)
    assert len(rows) == 251
    assert {len(r) for r in rows} == {1669}
    assert a.read_bytes() == b.read_bytes()
    ta = (tmp_path / "a.truth.json").read_text()
    assert ta == (tmp_path / "b.truth.json").read_text()
    assert len(json.loads(ta)["relevant_indices"]) == 15


def test_generate_rejects_too_many_signals(tmp_path, capsys):
    code = _run("generate", "--n", 250, "--p", 1667, "--k-linear", 2000,
                "--out", tmp_path / "x.csv")
    assert code == 2
    assert "k_linear + k_nonlinear must be <= p" in capsys.readouterr().err
    assert not (tmp_path / "x.csv").exists()


def test_generate_unwritable_target_is_io_error(tmp_path):
    code = _run("generate", "--n", 20, "--p", 3, "--k-linear", 1,
                "--out", tmp_path / "missing" / "x.csv", "-q")
    assert code == 3


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RFQSRR_SEED", "7")
    _run("generate", "--n", 20, "--p", 4, "--k-linear", 1, "--out", tmp_path / "env.csv", "-q")
    monkeypatch.delenv("RFQSRR_SEED")
    _run("generate", "--n", 20, "--p", 4, "--k-linear", 1, "--seed", 7,
         "--out", tmp_path / "flag.csv", "-q")
    _run("generate", "--n", 20, "--p", 4, "--k-linear", 1, "--out", tmp_path / "zero.csv", "-q")
    env = (tmp_path / "env.csv").read_bytes()
    assert env == (tmp_path / "flag.csv").read_bytes()
    assert env != (tmp_path / "zero.csv").read_bytes()


def test_bad_environment_seed(tmp_path, monkeypatch):
    monkeypatch.setenv("RFQSRR_SEED", "abc")
    assert _run("generate", "--n", 20, "--p", 4, "--k-linear", 1,
                "--out", tmp_path / "x.csv", "-q") == 2


# ------------------------------------------------------------------ select

def test_select_topn_zero_keep(planted, tmp_path):
    assert _run("select", planted, "--method", "topn", "--keep", 0,
                "--out", tmp_path / "s.csv", "-q") == 2


def test_select_topn_writes_outcome(planted, tmp_path):
    out = tmp_path / "s.csv"
    assert _run("select", planted, "--method", "topn", "--keep", 3, "--trees", 40,
                "--out", out, "-q") == 0
    rows = _read_csv(out)
    assert rows[0] == ["method", "feature", "score", "selected"]
    assert len(rows) == 11
    assert sum(int(r[3]) for r in rows[1:]) == 3
    assert {r[0] for r in rows[1:]} == {"TOP3"}
    man = json.loads((tmp_path / "s.manifest.json").read_text())
    assert man["status"] == "ok" and man["n_trees"] == 40 and man["seed"] == 0


def test_select_boruta_profile_is_recorded(planted, tmp_path):
    out = tmp_path / "b.csv"
    assert _run("select", planted, "--method", "boruta", "--profile", "b1k",
                "--max-iterations", 2, "--out", out, "--status-out", tmp_path / "st.csv",
                "-q") == 0
    man = json.loads((tmp_path / "b.manifest.json").read_text())
    assert man["n_trees"] == 1000
    assert man["method"] == "B1K"
    assert _read_csv(tmp_path / "st.csv")[0] == ["feature", "status", "hits", "trials",
                                                  "decision_iteration"]


def test_select_consensus_full_agreement_is_clean(tmp_path):
    # threshold 1.0 keeps only features every bag confirmed
    for seed in range(3):
        path = tmp_path / f"c{seed}.csv"
        _run("generate", "--n", 80, "--p", 12, "--k-linear", 2, "--noise-sd", 0.2,
             "--seed", seed, "--out", path, "-q")
        out = tmp_path / f"sel{seed}.csv"
        assert _run("select", path, "--method", "consensus", "--bags", 3, "--threshold", 1.0,
                    "--trees", 40, "--max-iterations", 20, "--seed", seed, "--out", out,
                    "-q") == 0
        chosen = [r[1] for r in _read_csv(out)[1:] if r[3] == "1"]
        assert all(nm.startswith("REL_") for nm in chosen)


@pytest.mark.parametrize("flags", [["--threshold", "0"], ["--bags", "0"]])
def test_select_consensus_bad_flags(planted, tmp_path, flags):
    assert _run("select", planted, "--method", "consensus", *flags,
                "--out", tmp_path / "s.csv", "-q") == 2


def test_zero_variance_response(tmp_path):
    rng = np.random.default_rng(0)
    d = Dataset(tuple(map(str, range(20))), ("a", "b"), rng.normal(size=(20, 2)), np.ones(20))
    write_csv(d, tmp_path / "flat.csv")
    assert _run("select", tmp_path / "flat.csv", "--method", "topn", "--keep", 1,
                "--out", tmp_path / "s.csv", "-q") == 4


def test_missing_and_malformed_data(tmp_path):
    assert _run("select", tmp_path / "nope.csv", "--method", "topn", "--keep", 1,
                "--out", tmp_path / "s.csv", "-q") == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("id,y,a\n" + "".join(f"m{i},1,x\n" for i in range(12)))
    assert _run("select", bad, "--method", "topn", "--keep", 1,
                "--out", tmp_path / "s.csv", "-q") == 3


def test_select_is_thread_invariant(planted, tmp_path):
    outs = []
    for t in (1, 3):
        out = tmp_path / f"t{t}.csv"
        _run("select", planted, "--method", "topn", "--keep", 4, "--trees", 60,
             "--threads", t, "--out", out, "-q")
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


# ------------------------------------------------------------------ train / predict

def test_train_predict_round_trip(planted, tmp_path):
    model = tmp_path / "m.json"
    assert _run("train", planted, "--trees", 50, "--min-node-size", 2, "--mtry", 10,
                "--model", model, "-q") == 0
    pred = tmp_path / "p.csv"
    assert _run("predict", planted, "--model", model, "--out", pred, "-q") == 0
    rows = _read_csv(pred)
    assert rows[0] == ["compound_id", "prediction"]
    d = load_csv(planted)
    got = np.array([float(r[1]) for r in rows[1:]])
    assert [r[0] for r in rows[1:]] == list(d.compound_ids)
    # deep trees reproduce their in-bag responses, so the average lands near y
    assert np.corrcoef(got, d.y)[0, 1] > 0.95
    again = tmp_path / "p2.csv"
    _run("predict", planted, "--model", model, "--out", again, "-q")
    assert pred.read_bytes() == again.read_bytes()


def test_predict_wrong_columns(planted, tmp_path):
    model = tmp_path / "m.json"
    _run("train", planted, "--trees", 5, "--model", model, "-q")
    d = load_csv(planted)
    write_csv(d.columns(range(d.p - 1)), tmp_path / "short.csv")
    assert _run("predict", tmp_path / "short.csv", "--model", model,
                "--out", tmp_path / "p.csv", "-q") == 5


def test_constant_model_predicts_constant(tmp_path):
    rng = np.random.default_rng(1)
    d = Dataset(tuple(map(str, range(15))), ("a", "b"), rng.normal(size=(15, 2)), np.full(15, 4.5))
    write_csv(d, tmp_path / "c.csv")
    _run("train", tmp_path / "c.csv", "--trees", 10, "--model", tmp_path / "m.json", "-q")
    assert _run("predict", tmp_path / "c.csv", "--model", tmp_path / "m.json",
                "--out", tmp_path / "p.csv", "-q") == 0
    assert {r[1] for r in _read_csv(tmp_path / "p.csv")[1:]} == {"4.5"}


def test_predict_with_unreadable_model(planted, tmp_path):
    (tmp_path / "m.json").write_text("{}")
    assert _run("predict", planted, "--model", tmp_path / "m.json",
                "--out", tmp_path / "p.csv", "-q") in (2, 3)


# ------------------------------------------------------------------ protocol

def _protocol(data, out, *extra):
    cfg = out.parent / f"{out.name}.cfg.json"
    cfg.write_text(json.dumps({"repetitions": 2, "methods": ["TOP3", "B1K", "C_0.5"],
                               "forest": {"n_trees": 20}, "max_iterations": 6,
                               "profiles": {"B1K": 20}, "consensus_bags": 2,
                               "reference_baseline": 0.31}))
    return _run("protocol", data, "--config", cfg, "--out-dir", out, "-q", *extra)


def test_protocol_outputs(planted, tmp_path):
    out = tmp_path / "run"
    assert _protocol(planted, out, "--seed", 7, "--deterministic") == 0
    rec = _read_csv(out / "records.csv")
    assert len(rec) == 1 + 2 * 3
    stab = _read_csv(out / "stability.csv")
    assert stab[0] == ["method", "frac_1.0", "frac_0.9", "frac_0.8", "frac_0.7", "frac_0.6",
                       "frac_0.5", "at_least_once", "noise", "average"]
    svg = (out / "r2_boxplot.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "</svg>" in svg
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "ok" and man["config"]["seed"] == 7
    assert man["started"] is None
    assert set(json.loads((out / "summary.json").read_text())) == {"TOP3", "B1K", "C_0.5"}


def test_protocol_is_byte_stable(planted, tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    _protocol(planted, a, "--seed", 7, "--deterministic", "--threads", 1)
    _protocol(planted, b, "--seed", 7, "--deterministic", "--threads", 3)
    _protocol(planted, c, "--seed", 7, "--threads", 1)
    for name in ("records.csv", "selections.csv", "stability.csv", "r2_boxplot.svg",
                 "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert (a / "records.csv").read_bytes() != (c / "records.csv").read_bytes()  # wall times
    assert (a / "selections.csv").read_bytes() == (c / "selections.csv").read_bytes()


def test_protocol_bad_config(planted, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"repetitons": 2}')
    assert _run("protocol", planted, "--config", cfg, "--out-dir", tmp_path / "o", "-q") == 2
    cfg.write_text("not json")
    assert _run("protocol", planted, "--config", cfg, "--out-dir", tmp_path / "o", "-q") == 2


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "rfqsrr.cli", "--version"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("rfqsrr ")
