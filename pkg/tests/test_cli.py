import csv
import json

import pytest

from metacfg.cli import main
from metacfg.corpus import Vocabulary, read_corpus
from metacfg.grammar import load_preset
from metacfg.model import load_checkpoint
from metacfg.sampler import read_sidecar


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_oracle_enumerate(capsys):
    code, out, _ = run(capsys, "oracle", "enumerate", "--grammar", "fig21", "--metadata", "0,1")
    d = json.loads(out)
    assert code == 0 and d["count"] == 4 and d["total"] == 1.0
    assert sorted(s["tokens"] for s in d["strings"]) == ["0 0 0 1", "0 0 1 0 1", "1 1 1 0 1", "1 1 1 1 0 1"]


def test_oracle_posterior_and_next_token(capsys, tmp_path):
    code, out, _ = run(capsys, "oracle", "posterior", "--grammar", "fig21", "--prefix", "0 0 0 1")
    assert json.loads(out)["posterior"] == [{"metadata": [0, 1], "prob": 1.0}]
    target = tmp_path / "nt.json"
    code, _, _ = run(capsys, "oracle", "next-token", "--grammar", "fig21", "--prefix", "0 0 0 1", "--out", str(target))
    dist = json.loads(target.read_text())["distribution"]
    assert dist == {"0": 0.0, "1": 0.0, "[EOS]": 1.0}


def test_oracle_errors(capsys):
    code, _, err = run(capsys, "oracle", "posterior", "--grammar", "fig21", "--prefix", "0 0 0 0 0 0 0")
    assert code == 2 and "zero" in err
    with pytest.raises(SystemExit):
        main(["oracle", "posterior", "--grammar", "fig21", "--prefix", "7"])


def test_sample_and_verify(capsys, tmp_path):
    side = tmp_path / "s.txt"
    tok = tmp_path / "s.bin"
    code, _, _ = run(capsys, "sample", "--grammar", "toy_a", "--n", "40", "--seed", "3", "--out", str(side),
                     "--tokenized", str(tok), "--dm", "2")
    assert code == 0
    g = load_preset("toy_a")
    header, sents = read_sidecar(side, g)
    assert len(sents) == 40 and header["seed"] == 3
    assert len(read_corpus(tok, Vocabulary.for_grammar(g))) == 40
    code, out, _ = run(capsys, "verify", "--grammar", "toy_a", "--input", str(side))
    lines = out.strip().splitlines()
    assert len(lines) == 41 and all(l.startswith("ACCEPT") for l in lines[:-1])
    assert lines[-1] == "# n=40 ga=1.0000 stderr=0.0000"


def test_verify_plain_lines(capsys, tmp_path):
    f = tmp_path / "in.txt"
    f.write_text("0 0 0 1\n0 1 0 1\n# comment\n0 0 9 1\n")
    code, out, _ = run(capsys, "verify", "--grammar", "fig21", "--metadata", "0,1", "--input", str(f))
    lines = out.strip().splitlines()
    assert [l.split("\t")[0] for l in lines[:3]] == ["ACCEPT", "REJECT", "REJECT"]
    assert lines[3].startswith("# n=3 ga=0.3333")


def test_train_and_eval(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"preset": "tiny", "n_train": 300, "n_test": 50, "eval_every": 10, "batch_size": 16}))
    out = tmp_path / "run"
    code, _, _ = run(capsys, "train", "--grammar", "toy_a", "--dm", "2", "--config", str(cfg), "--out", str(out))
    assert code == 0
    rows = list(csv.DictReader((out / "loss_trace.csv").open()))
    assert list(rows[0]) == ["step", "train_loss", "test_loss_no_meta", "test_loss_with_meta"]
    assert [int(r["step"]) for r in rows] == [10, 19]
    ck = load_checkpoint(out / "model.ckpt")
    assert ck.extra["dm"] == 2 and ck.step == 19

    report = tmp_path / "rep" / "report.json"
    code, _, err = run(
        capsys, "eval", "--checkpoint", str(out / "model.ckpt"), "--grammar", "toy_a", "--out", str(report),
        "--n-test", "40", "--n-ga", "10", "--prompt-lengths", "1,2", "--n-probe", "200",
        "--probe-layers", "1,2", "--probe-positions", "0", "--hidden-dump", str(tmp_path / "hid"),
    )
    assert code == 0, err
    d = json.loads(report.read_text())
    assert d["checkpoint_id"] == ck.id and d["dm"] == 2
    assert set(d["losses"]) == {"no_metadata", "with_metadata"} and set(d["ga"]) == {"1", "2"}
    assert d["calibration"]["n"] == d["losses"]["no_metadata"]["n_tokens"]
    assert len(d["probes"]) == 2 * 1 * 2
    names = {p.name for p in report.parent.iterdir()}
    assert {"ga.csv", "probe.csv", "calibration.csv", "loss_positions.csv"} <= names
    assert sorted(p.name for p in (tmp_path / "hid").iterdir()) == ["hidden_l1_p0.bin", "hidden_l2_p0.bin"]


def test_eval_rejects_unknown_suite(tmp_path):
    with pytest.raises(SystemExit):
        main(["eval", "--checkpoint", "x", "--grammar", "toy_a", "--suite", "loss,bogus", "--out", str(tmp_path / "r")])


def test_missing_grammar_file(capsys):
    code, _, err = run(capsys, "oracle", "enumerate", "--grammar", "/nonexistent.cfg")
    assert code == 2 and "error" in err
