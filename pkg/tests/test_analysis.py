import csv

import numpy as np
import pytest

from addlens import analysis as an
from addlens import datagen as dg
from addlens import training as tr
from addlens.model import ModelConfig, TransformerModel


@pytest.fixture(scope="module")
def untrained():
    return TransformerModel(ModelConfig(n_digits=5, d_model=24, d_mlp=48, seed=1))


@pytest.fixture(scope="module")
def questions():
    return an.analysis_questions(5, random_count=32, suite=False)


def test_answer_rows_match_layout(untrained):
    assert an.answer_rows(untrained) == [11, 12, 13, 14, 15, 16]
    assert an.digit_rows(untrained) == {5: 11, 4: 12, 3: 13, 2: 14, 1: 15, 0: 16}
    plus = TransformerModel(ModelConfig(n_digits=5, d_model=24, d_mlp=48, plus_prefix=True))
    assert an.answer_rows(plus) == [11, 12, 13, 14, 15, 16, 17]
    assert an.digit_rows(plus)[5] == 12


def test_empty_position_ablation_matches_plain_eval(untrained, questions):
    res = an.ablate_positions(untrained, questions, [])
    assert res.loss == pytest.approx(tr.evaluate(untrained, questions, decode=False).loss, abs=1e-12)


def test_position_sweep_has_one_row_per_token(untrained, questions):
    results = an.position_sweep(untrained, questions[:8])
    assert [r.label for r in results] == [str(p) for p in range(18)]


def test_ablation_off_answer_rows_leaves_loss_unchanged(untrained, questions):
    # only rows 11..16 feed the answer loss; everything else is invisible to it
    base = an.ablate_positions(untrained, questions, []).loss
    for p in (0, 5, 10, 17):
        assert an.ablate_positions(untrained, questions, [p]).loss == pytest.approx(base, abs=1e-12)


def test_head_sweep_and_bad_head(untrained, questions):
    res = an.head_sweep(untrained, questions)
    assert [r.label for r in res] == ["0", "1", "2"]
    with pytest.raises(ValueError):
        an.ablate_head(untrained, questions, 3)


def test_empty_question_set_rejected(untrained):
    with pytest.raises(ValueError):
        an.ablate_positions(untrained, [], [11])


def test_failure_patterns():
    assert an.failure_pattern(np.array([True, False, True])) == "yNy"
    groups = [("yyy", 10), ("yNy", 4)]
    assert an.incorrect_only(groups) == [("yNy", 4)]


def test_expected_pattern(untrained):
    assert an.expected_pattern(untrained, 11) == "Nyyyyy"
    assert an.expected_pattern(untrained, 16) == "yyyyyN"
    assert an.expected_pattern(untrained, 3) is None


def test_group_failures_counts_every_question(untrained, questions):
    groups = an.group_failures(untrained, questions)
    assert sum(c for _, c in groups) == len(questions)
    assert all(len(p) == 6 for p, _ in groups)


def test_untrained_staircase_baseline_is_low(untrained):
    qs = dg.random_batch(dg.GeneratorConfig(5, 3, 0.0), 64)
    rep = an.detect_double_staircase(untrained, qs)
    assert rep.matched_fraction < 0.2
    assert rep.rows == [11, 12, 13, 14, 15, 16]
    d = rep.to_dict()
    assert set(d) >= {"matched_fraction", "offsets", "cells"}


def test_staircase_detects_a_planted_pattern(monkeypatch, untrained):
    n, H, L = 5, 3, 18
    rows = an.digit_rows(untrained)
    lags = {0: 0, 1: 1, 2: 2}

    def fake(tokens):
        pat = np.full((len(tokens), H, L, L), 1e-3)
        for j, r in rows.items():
            for h, o in lags.items():
                k = j - o
                if 0 <= k < n:
                    pa, pb = an._digit_positions(n, k)
                    pat[:, h, r, pa] = pat[:, h, r, pb] = 0.45
        return pat

    monkeypatch.setattr(untrained, "attention_patterns", fake)
    rep = an.detect_double_staircase(untrained, dg.random_batch(dg.GeneratorConfig(5, 3, 0.0), 4))
    assert rep.matched_fraction == 1.0
    assert rep.offsets == lags


def test_digit_positions():
    # "54321+77779": D4 is the first token, D'0 the 11th
    assert an._digit_positions(5, 4) == (0, 6)
    assert an._digit_positions(5, 0) == (4, 10)


def test_head_role_map_shape(untrained, questions):
    roles = an.head_role_map(untrained, questions)
    assert set(roles.roles) == {0, 1, 2}
    assert set(roles.roles.values()) <= {"BA", "MC1-carry", "lookback", "unresolved"}


def test_timing_report_shape(untrained, questions):
    rep = an.answer_timing_check(untrained, questions[:8])
    assert rep.error_rates.shape == (18, 6)
    assert rep.revealed_at == {5: 12, 4: 13, 3: 14, 2: 15, 1: 16, 0: 17}


def test_table_writers(tmp_path, untrained, questions):
    results = an.position_sweep(untrained, questions[:4], group=True)
    an.write_position_table(tmp_path / "p.csv", results)
    an.write_failure_table(tmp_path / "f.csv", {11: results[11].failures})
    an.write_head_table(tmp_path / "h.csv", an.head_sweep(untrained, questions[:4]))
    with open(tmp_path / "p.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 18 and rows[0]["threshold"] == "0.08"
    with open(tmp_path / "h.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3
