import json
import subprocess
import sys

import pytest

from addlens import cli
from addlens import datagen as dg


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = run("train", "--n-digits", 3, "--d-model", 24, "--d-mlp", 48, "--steps", 10,
               "--batch-size", 16, "--out", out)
    assert code == cli.EXIT_TARGET  # ten steps cannot reach the target
    return out / "model.ckpt"


def test_train_writes_artifacts(ckpt):
    out = ckpt.parent
    for name in ("model.ckpt", "loss.csv", "loss.svg", "summary.json", "run_config.ini"):
        assert (out / name).is_file()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["target_loss"] == 0.05 and summary["met_target"] is False


def test_train_zero_steps_exits_nonzero(tmp_path):
    assert run("train", "--n-digits", 2, "--d-model", 24, "--d-mlp", 48, "--steps", 0, "--out", tmp_path) != 0
    assert (tmp_path / "model.ckpt").is_file()


def test_ten_digit_target_is_relaxed(tmp_path):
    run("train", "--n-digits", 10, "--d-model", 24, "--d-mlp", 48, "--steps", 0, "--out", tmp_path)
    assert "target_loss = 0.08" in (tmp_path / "run_config.ini").read_text()


def test_config_file_and_flag_precedence(tmp_path, monkeypatch):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[run]\nn_digits = 2\nd_model = 24\nd_mlp = 48\nsteps = 0\nlr = 0.5\n")
    monkeypatch.setenv("ADDLENS_SEED", "9")
    out = tmp_path / "o"
    run("train", "--config", cfg, "--lr", "0.25", "--out", out)
    text = (out / "run_config.ini").read_text()
    assert "lr = 0.25" in text and "n_digits = 2" in text and "seed = 9" in text
    # the written config reproduces the run
    out2 = tmp_path / "o2"
    run("train", "--config", out / "run_config.ini", "--out", out2)
    assert (out / "model.ckpt").read_bytes() == (out2 / "model.ckpt").read_bytes()


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("bogus = 1\n")
    assert run("train", "--config", cfg, "--out", tmp_path) == cli.EXIT_USAGE


def test_ablate_position_sweep(ckpt, tmp_path):
    assert run("ablate", "--checkpoint", ckpt, "--sweep", "positions", "--out", tmp_path) == 0
    rows = (tmp_path / "positions.csv").read_text().splitlines()
    assert len(rows) == 1 + 12  # 3-digit questions are 12 tokens
    assert (tmp_path / "failures.csv").is_file()


def test_ablate_head_sweep(ckpt, tmp_path):
    assert run("ablate", "--checkpoint", ckpt, "--site", "head_out", "--sweep", "heads",
               "--category", "BA", "--out", tmp_path) == 0
    assert len((tmp_path / "heads.csv").read_text().splitlines()) == 4


def test_ablate_empty_positions_matches_eval(ckpt, tmp_path):
    run("ablate", "--checkpoint", ckpt, "--positions", "", "--suite", "curated", "--out", tmp_path / "a")
    run("eval", "--checkpoint", ckpt, "--suite", "curated", "--out", tmp_path / "e")
    ab = json.loads((tmp_path / "a" / "ablation.json").read_text())
    ev = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert ab["loss"] == pytest.approx(ev["loss"], abs=1e-12)
    assert ab["threshold"] == 0.1


def test_missing_checkpoint_is_an_error(tmp_path):
    assert run("ablate", "--checkpoint", tmp_path / "nope.ckpt", "--out", tmp_path) == cli.EXIT_USAGE


def test_attention_outputs(ckpt, tmp_path):
    assert run("attention", "--checkpoint", ckpt, "--question", "321+779", "--out", tmp_path) == 0
    pat = json.loads((tmp_path / "attention.json").read_text())["pattern"]
    assert len(pat) == 3 and len(pat[0]) == 12 and len(pat[0][0]) == 12
    assert len(list(tmp_path.glob("attention_head*.svg"))) == 3
    rep = json.loads((tmp_path / "staircase.json").read_text())
    assert rep["matched_fraction"] < 0.2


def test_attention_rejects_wrong_width(ckpt, tmp_path):
    assert run("attention", "--checkpoint", ckpt, "--question", "54321+77779", "--out", tmp_path) == cli.EXIT_USAGE


def test_oracle_enumerate(tmp_path):
    assert run("oracle", "--n", 3, "--out", tmp_path) == 0
    rows = (tmp_path / "divergences.csv").read_text().splitlines()
    assert rows[0] == "question_a,question_b,true_answer,algorithm_answer,chain_length"
    assert any(r.startswith("445,555,") for r in rows)
    freq = json.loads((tmp_path / "frequencies.json").read_text())
    assert freq["column"]["P_column_carry"] == pytest.approx(0.45)


def test_oracle_n1_is_empty_and_n4_enumerate_refused(tmp_path):
    run("oracle", "--n", 1, "--out", tmp_path / "a")
    assert len((tmp_path / "a" / "divergences.csv").read_text().splitlines()) == 1
    assert run("oracle", "--n", 4, "--out", tmp_path / "b") == cli.EXIT_USAGE
    assert run("oracle", "--n", 4, "--mode", "sample", "--count", 2000, "--out", tmp_path / "c") == 0


def test_eval_file_and_empty_file(ckpt, tmp_path):
    qfile = tmp_path / "q.txt"
    dg.write_questions(qfile, [dg.Question.parse("123+456"), dg.Question.parse("999+001")])
    assert run("eval", "--checkpoint", ckpt, "--questions", qfile, "--out", tmp_path / "e") == 0
    assert json.loads((tmp_path / "e" / "eval.json").read_text())["questions"] == 2
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert run("eval", "--checkpoint", ckpt, "--questions", empty, "--out", tmp_path / "x") != 0


def test_export_suite_roundtrip(tmp_path):
    run("export-suite", "--n-digits", 5, "--out", tmp_path)
    items = dg.read_questions(tmp_path / "suite_5.txt")
    assert len(items) >= 100 and all(c is not None for _, c in items)


def test_usage_error_exit_code():
    proc = subprocess.run([sys.executable, "-m", "addlens.cli", "train", "--steps", "x"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
