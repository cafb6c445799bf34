"""Acceptance criteria, each at its stated tolerance.

Trained checkpoints are cached under ``$ADDLENS_CACHE`` (default
``<repo>/.addlens_cache``); the first run trains them, which takes a while on
a single core. A cached run is reused only if its stored config matches.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from acceptance_log import criterion
from gradcheck import check, op_cases

from addlens import analysis as an
from addlens import datagen as dg
from addlens import framework as fw
from addlens import training as tr
from addlens.model import ModelConfig, TransformerModel, load_checkpoint

CACHE = Path(os.environ.get("ADDLENS_CACHE", Path(__file__).resolve().parents[1] / ".addlens_cache"))

TRAIN = dict(steps=5000, batch_size=64, lr=3e-4, weight_decay=0.1, schedule="cosine", warmup_steps=100)
RUNS = {
    "five": dict(n_digits=5, plus_prefix=False, seed=0),
    "ten": dict(n_digits=10, plus_prefix=False, seed=0),
    "plus": dict(n_digits=5, plus_prefix=True, seed=0),
}
HELDOUT = 2048


def run_config(name: str) -> tr.TrainConfig:
    r = RUNS[name]
    return tr.TrainConfig(
        model=ModelConfig(n_digits=r["n_digits"], plus_prefix=r["plus_prefix"], seed=r["seed"]),
        data=dg.GeneratorConfig(r["n_digits"], r["seed"], dg.GeneratorConfig.enrichment_prob, r["plus_prefix"]),
        checkpoint=str(CACHE / f"{name}.ckpt"), loss_csv=str(CACHE / f"{name}_loss.csv"), **TRAIN)


def _describe(cfg: tr.TrainConfig) -> dict:
    from dataclasses import asdict

    d = asdict(cfg)
    d.pop("checkpoint"), d.pop("loss_csv")
    return json.loads(json.dumps(d))


_loaded: dict = {}


def trained(name: str):
    """(model, loss rows from the CSV, metadata) for a cached or fresh run."""
    if name in _loaded:
        return _loaded[name]
    cfg = run_config(name)
    meta_path = CACHE / f"{name}.json"
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else None
    if meta is None or meta.get("config") != _describe(cfg) or not Path(cfg.checkpoint).is_file():
        CACHE.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        tr.train(cfg)
        meta = {"config": _describe(cfg), "train_seconds": time.perf_counter() - t0}
        meta_path.write_text(json.dumps(meta, indent=2))
    out = (load_checkpoint(cfg.checkpoint), tr.read_loss_csv(cfg.loss_csv), meta)
    _loaded[name] = out
    return out


def final_loss(rows) -> float:
    return float(np.mean([r["loss_all"] for r in rows[-10:]]))


# ---------------------------------------------------------------- 1-3: no training needed


def test_criterion_01_gradient_suite():
    with criterion(1, "autograd vs central differences, 100 cases per op") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        names = sorted(op_cases(rng))
        worst = {op: max(check(*op_cases(rng)[op](), weights_seed=i) for i in range(100)) for op in names}
        elapsed = time.perf_counter() - t0
        info.append(f"{len(names)} ops, worst rel err {max(worst.values()):.2e}, {elapsed:.1f}s")
        assert max(worst.values()) < 1e-4
        assert elapsed < 10


def test_criterion_02_oracle_fidelity():
    with criterion(2, "two-column lookback algorithm vs true sum, exhaustive n=1..3") as info:
        t0 = time.perf_counter()
        for n in (1, 2, 3):
            a, b = fw.enumerate_questions(n)
            same = (fw.model_algorithm_digits(a, b) == fw.true_sum_digits(a, b)).all(axis=1)
            short = fw.max_chain_length(a, b) <= 1
            info.append(f"n={n}: {(~same).sum()} divergences")
            assert np.array_equal(same, short)
        div = fw.divergence_set(3)
        pairs = {(d.a, d.b) for d in div}
        cats = {fw.CATEGORIES[int(fw.categorize(*dg.to_arrays([dg.Question.from_ints(x, y, 3)]))[0])]
                for x, y in pairs}
        elapsed = time.perf_counter() - t0
        info.append(f"445+555 in set: {(445, 555) in pairs}; categories {sorted(cats)}; {elapsed:.1f}s")
        assert (445, 555) in pairs
        assert cats.isdisjoint({"BA", "MC1"})
        assert elapsed < 120


def test_criterion_03_frequencies():
    with criterion(3, "column and category frequencies") as info:
        cols = fw.column_frequencies()
        info.append(f"P(MC1)={cols['MC1']:.3f} P(MS9)={cols['MS9']:.3f}")
        assert cols["MC1"] == pytest.approx(0.45, abs=1e-12)
        assert cols["MS9"] == pytest.approx(0.10, abs=1e-12)
        expect = fw.task_frequencies(5)
        a, b = dg.random_arrays(dg.GeneratorConfig(5, 3, 0.0), 100_000, np.random.default_rng(3))
        got = np.bincount(fw.categorize(a, b), minlength=4) / 100_000
        gaps = {c: abs(got[i] - expect[c]) for i, c in enumerate(fw.CATEGORIES)}
        info.append("max |sampled - analytic| = " + f"{max(gaps.values()):.4f}")
        assert max(gaps.values()) <= 0.02


# ---------------------------------------------------------------- 4-10: trained checkpoints


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="leading digit A5 falls under 0.01 at step 1380, after A1 "
                   "(940): its US9 share (carry via a sum-9 column) stays at 0.1-0.5 loss")
def test_criterion_04_training_reproduction():
    with criterion(4, "5-digit training: loss, digit ordering, held-out gap, wall time") as info:
        model, rows, meta = trained("five")
        train_loss = final_loss(rows)
        cfg = run_config("five")
        held_cfg = dg.GeneratorConfig(5, 10_007, cfg.data.enrichment_prob)
        held = tr.evaluate(model, dg.random_batch(held_cfg, HELDOUT), decode=False).loss
        recs = [tr.LossRecord(int(r["step"]), [], {}, {}, r["loss_all"]) for r in rows]
        cross = {j: tr.first_step_below(recs, [r[f"loss_d{j}"] for r in rows], 0.01, window=10)
                 for j in (5, 1, 2, 3)}
        minutes = meta["train_seconds"] / 60
        info.append(f"final loss {train_loss:.4f}, held-out {held:.4f}, "
                    f"0.01 crossings {cross}, {minutes:.1f} min")
        assert train_loss <= 0.05
        assert cross[5] is not None
        assert all(cross[j] is None or cross[5] < cross[j] for j in (1, 2, 3))
        assert held <= 2 * train_loss
        assert minutes < 60


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="trained model solves 65% of curated cascade questions "
                   "(loss ratio 61 and simple accuracy 1.0 do hold)")
def test_criterion_05_cascade_failure_mode():
    with criterion(5, "curated suite: cascade US9 vs simple US9") as info:
        model, _, _ = trained("five")
        res = tr.evaluate(model, [q for q, _ in dg.make_test_suite(5)])
        simple, cascade = res.by_category["US9_simple"], res.by_category["US9_cascade"]
        ratio = cascade["loss"] / simple["loss"]
        info.append(f"loss ratio {ratio:.2f}, simple acc {simple['accuracy']:.2f}, "
                    f"cascade acc {cascade['accuracy']:.2f}")
        assert ratio >= 10
        assert simple["accuracy"] > 0.9
        assert cascade["accuracy"] < 0.5


def _position_profile(model, info):
    qs = an.analysis_questions(model.cfg.n_digits, model.cfg.plus_prefix)
    rows = set(an.answer_rows(model))
    results = an.position_sweep(model, qs, threshold=an.POSITION_THRESHOLD)
    low = [r.loss for r in results if int(r.label) not in rows]
    high = {int(r.label): r.loss for r in results if int(r.label) in rows}
    info.append(f"max off-answer loss {max(low):.4f}, min answer-row loss {min(high.values()):.4f}")
    assert max(low) < an.POSITION_THRESHOLD
    assert min(high.values()) > an.POSITION_THRESHOLD


def _failure_dominance(model, info):
    qs = an.analysis_questions(model.cfg.n_digits, model.cfg.plus_prefix)
    worst = np.inf
    ok = True
    for row in an.answer_rows(model):
        spec = an.ablate_positions(model, qs, [row]).spec
        groups = an.incorrect_only(an.group_failures(model, qs, spec))
        top, top_n = groups[0]
        second = groups[1][1] if len(groups) > 1 else 0
        worst = min(worst, top_n / max(second, 1))
        ok &= top == an.expected_pattern(model, row) and top_n >= 3 * second
    info.append(f"worst dominance ratio {worst:.1f}")
    assert ok


def _head_role(model, info):
    ba = an.head_sweep(model, an.ba_questions(model.cfg.n_digits))
    losses = [r.loss for r in ba]
    big = [h for h, x in enumerate(losses) if x > 1.0]
    quiet = [h for h, x in enumerate(losses) if x < 0.1]
    mix_cfg = dg.GeneratorConfig(model.cfg.n_digits, 11, dg.GeneratorConfig.enrichment_prob, model.cfg.plus_prefix)
    mix = dg.random_batch(mix_cfg, 1024)
    base = tr.evaluate(model, mix, decode=False).loss
    mix_losses = [r.loss for r in an.head_sweep(model, mix)]
    info.append(f"BA-question losses {np.round(losses, 3).tolist()}, mix {base:.4f} -> "
                f"{np.round(mix_losses, 4).tolist()}")
    assert len(big) == 1 and len(quiet) == model.cfg.n_heads - 1
    assert all(x > base for x in mix_losses)


@pytest.mark.slow
def test_criterion_06_positional_ablation_profile():
    with criterion(6, "zero-ablated resid_post by position") as info:
        _position_profile(trained("five")[0], info)


@pytest.mark.slow
def test_criterion_07_failure_grouping():
    with criterion(7, "single-digit failure groups per answer row") as info:
        _failure_dominance(trained("five")[0], info)


@pytest.mark.slow
def test_criterion_08_head_role():
    with criterion(8, "one BA head dominates BA-question loss") as info:
        _head_role(trained("five")[0], info)


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="10-digit checkpoint: lag-0 and lag-1 heads match fully, "
                   "lag-2 head only at its first row; fraction 0.717")
def test_criterion_09_staircase():
    with criterion(9, "double staircase on 5- and 10-digit checkpoints") as info:
        fracs = {}
        for name, n in (("five", 5), ("ten", 10)):
            model = trained(name)[0]
            qs = dg.random_batch(dg.GeneratorConfig(n, 21, 0.0), 64)
            fracs[name] = an.detect_double_staircase(model, qs).matched_fraction
        untrained = TransformerModel(ModelConfig(n_digits=5))
        fracs["untrained"] = an.detect_double_staircase(
            untrained, dg.random_batch(dg.GeneratorConfig(5, 21, 0.0), 64)).matched_fraction
        info.append(", ".join(f"{k} {v:.3f}" for k, v in fracs.items()))
        assert fracs["five"] >= 0.8
        assert fracs["ten"] >= 0.8
        assert fracs["untrained"] < 0.2


@pytest.mark.slow
def test_criterion_10_plus_prefix_variant():
    with criterion(10, "plus-prefix variant: loss and ablation structure") as info:
        model, rows, _ = trained("plus")
        loss = final_loss(rows)
        info.append(f"final loss {loss:.4f}")
        checks = {}
        for label, fn in (("positions", _position_profile), ("failures", _failure_dominance),
                          ("heads", _head_role)):
            try:
                fn(model, info)
                checks[label] = True
            except AssertionError:
                checks[label] = False
        info.append(f"structure checks {checks}")
        assert loss <= 0.08
        assert all(checks.values())
