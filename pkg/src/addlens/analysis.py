"""Ablation experiments, failure grouping, staircase detection and head roles."""
from __future__ import annotations

import csv
import itertools
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import datagen as dg
from . import framework as fw
from .model import (MIN_MEAN_QUESTIONS, InterventionSpec, MeanStats, TransformerModel,
                    collect_mean_activations, mean_stats_over)
from .training import answer_slice, evaluate, greedy_decode, teacher_forced_nll

POSITION_THRESHOLD = 0.08
HEAD_THRESHOLD = 0.08
SUITE_THRESHOLD = 0.1
STAIRCASE_MASS = 0.5
ROLE_MARGIN = 2.0


@dataclass
class AblationResult:
    spec: InterventionSpec | None
    loss: float
    threshold: float
    failures: list[tuple[str, int]] = field(default_factory=list)
    per_category: dict[str, float] = field(default_factory=dict)
    label: str = ""

    @property
    def important(self) -> bool:
        return self.loss > self.threshold


def _tokens(model: TransformerModel, questions: Sequence[dg.Question]) -> np.ndarray:
    if not questions:
        raise ValueError("empty question set")
    return dg.tokenize_batch(questions, model.cfg.plus_prefix)


def _category_losses(model, questions, nll) -> dict[str, float]:
    a, b = dg.to_arrays(questions)
    cats = fw.categorize(a, b)
    q_loss = nll.mean(axis=1)
    return {c: float(q_loss[cats == i].mean()) for i, c in enumerate(fw.CATEGORIES) if (cats == i).any()}


def answer_rows(model: TransformerModel) -> list[int]:
    """Positions whose next-token prediction is an answer token."""
    lo, hi = answer_slice(model.cfg.n_digits, model.cfg.plus_prefix)
    return list(range(lo - 1, hi - 1))


def digit_rows(model: TransformerModel) -> dict[int, int]:
    """Map answer digit ``j`` (0 = units) to the row that predicts it."""
    n = model.cfg.n_digits
    rows = answer_rows(model)[-(n + 1):]
    return {n - i: r for i, r in enumerate(rows)}


def reference_means(model: TransformerModel, count: int = 256, seed: int = 97) -> MeanStats:
    """Mean activations over ``count`` uniform random questions (>= 64)."""
    cfg = dg.GeneratorConfig(model.cfg.n_digits, seed, 0.0, model.cfg.plus_prefix)
    rng = np.random.default_rng(seed)
    batches = []
    left = max(count, 64)
    while left > 0:
        k = min(left, 256)
        batches.append(dg.tokens_from_arrays(*dg.random_arrays(cfg, k, rng), model.cfg.plus_prefix))
        left -= k
    return mean_stats_over(model, batches)


def ablation_means(model: TransformerModel, questions: Sequence[dg.Question]) -> MeanStats:
    """Means over the evaluated questions themselves, or the uniform reference set if too few."""
    if len(questions) >= MIN_MEAN_QUESTIONS:
        return collect_mean_activations(model, questions)
    return reference_means(model)


# ---------------------------------------------------------------- positional ablation


def ablate_positions(model: TransformerModel, questions: Sequence[dg.Question], positions,
                     mode: str = "zero", threshold: float = POSITION_THRESHOLD,
                     means: MeanStats | None = None, group: bool = False) -> AblationResult:
    tokens = _tokens(model, questions)
    if mode == "mean" and means is None:
        means = ablation_means(model, questions)
    spec = InterventionSpec("resid_post", frozenset(positions), mode=mode, mean_source=means)
    nll = teacher_forced_nll(model, tokens, spec)
    failures = group_failures(model, questions, spec) if group else []
    label = ",".join(map(str, sorted(spec.positions))) or "-"
    return AblationResult(spec, float(nll.mean()), threshold, failures,
                          _category_losses(model, questions, nll), label)


def position_sweep(model: TransformerModel, questions, threshold: float = POSITION_THRESHOLD,
                   group: bool = False) -> list[AblationResult]:
    return [ablate_positions(model, questions, [p], threshold=threshold, group=group)
            for p in range(model.cfg.n_ctx)]


# ---------------------------------------------------------------- head ablation


def ablate_head(model: TransformerModel, questions: Sequence[dg.Question], head: int,
                threshold: float = HEAD_THRESHOLD, means: MeanStats | None = None) -> AblationResult:
    if not 0 <= head < model.cfg.n_heads:
        raise ValueError(f"head {head} outside [0, {model.cfg.n_heads})")
    tokens = _tokens(model, questions)
    means = means if means is not None else ablation_means(model, questions)
    spec = InterventionSpec("head_out", frozenset(range(model.cfg.n_ctx)), frozenset([head]),
                            mode="mean", mean_source=means)
    nll = teacher_forced_nll(model, tokens, spec)
    return AblationResult(spec, float(nll.mean()), threshold, [],
                          _category_losses(model, questions, nll), str(head))


def head_sweep(model, questions, threshold: float = HEAD_THRESHOLD,
               means: MeanStats | None = None) -> list[AblationResult]:
    means = means if means is not None else ablation_means(model, questions)
    return [ablate_head(model, questions, h, threshold, means) for h in range(model.cfg.n_heads)]


# ---------------------------------------------------------------- failure groups


def _chunks(n: int, size: int = 512):
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


def failure_pattern(ok_row: np.ndarray) -> str:
    return "".join("y" if x else "N" for x in ok_row)


def group_failures(model: TransformerModel, questions: Sequence[dg.Question], spec=None,
                   include_correct: bool = True, teacher_forced: bool = True) -> list[tuple[str, int]]:
    """Count answer patterns (``y``/``N`` per answer token, most significant first).

    By default each answer token is the argmax at its predicting row with the
    true answer as context, the same view the per-digit losses use, so an
    ablated row only marks the digit it predicts. ``teacher_forced=False``
    feeds predictions back instead and lets one wrong digit spread.
    """
    tokens = _tokens(model, questions)
    lo, hi = answer_slice(model.cfg.n_digits, model.cfg.plus_prefix)
    if teacher_forced:
        pred = np.concatenate([model.forward_with_intervention(tokens[sl], spec)[:, lo - 1:hi - 1].argmax(-1)
                               for sl in _chunks(len(tokens))])
    else:
        pred = greedy_decode(model, tokens, spec)
    ok = pred == tokens[:, lo:hi]
    counts = Counter(failure_pattern(r) for r in ok)
    if not include_correct:
        counts.pop("y" * ok.shape[1], None)
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


def incorrect_only(groups: list[tuple[str, int]]) -> list[tuple[str, int]]:
    return [(p, c) for p, c in groups if "N" in p]


def expected_pattern(model: TransformerModel, row: int) -> str | None:
    """Single-N pattern for the answer token predicted at ``row``."""
    rows = answer_rows(model)
    if row not in rows:
        return None
    k = rows.index(row)
    return "".join("N" if i == k else "y" for i in range(len(rows)))


# ---------------------------------------------------------------- answer timing


@dataclass
class TimingReport:
    computed_at: dict[int, int | None]  # digit j -> dominant row (None = inconclusive)
    revealed_at: dict[int, int]  # digit j -> position of the answer token
    error_rates: np.ndarray  # [rows, answer tokens]

    @property
    def one_row_early(self) -> dict[int, bool]:
        return {j: r is not None and r == self.revealed_at[j] - 1 for j, r in self.computed_at.items()}


def answer_timing_check(model: TransformerModel, questions: Sequence[dg.Question],
                        dominance: float = 3.0) -> TimingReport:
    """For each answer digit, the row whose zero-ablation flips it most."""
    tokens = _tokens(model, questions)
    lo, hi = answer_slice(model.cfg.n_digits, model.cfg.plus_prefix)
    n = model.cfg.n_digits
    rates = np.zeros((model.cfg.n_ctx, hi - lo))
    for r in range(model.cfg.n_ctx):
        spec = InterventionSpec("resid_post", frozenset([r]))
        pred = greedy_decode(model, tokens, spec)
        rates[r] = (pred != tokens[:, lo:hi]).mean(axis=0)
    computed, revealed = {}, {}
    for j in range(n + 1):
        k = (hi - lo) - 1 - j
        col = rates[:, k]
        order = np.argsort(-col, kind="stable")
        best, second = col[order[0]], col[order[1]]
        computed[j] = int(order[0]) if best > 0 and best >= dominance * max(second, 1e-12) else None
        revealed[j] = lo + k
    return TimingReport(computed, revealed, rates)


# ---------------------------------------------------------------- staircase


@dataclass
class StaircaseReport:
    rows: list[int]
    top_keys: dict[tuple[int, int], tuple[int, int]]  # (row, head) -> two most attended keys
    matched: dict[tuple[int, int], float]  # template cell -> fraction of questions matching
    offsets: dict[int, int]  # head -> rows of lag behind the leading head
    matched_fraction: float
    partial: bool = False

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "offsets": {str(h): o for h, o in self.offsets.items()},
            "matched_fraction": self.matched_fraction,
            "partial": self.partial,
            "cells": [{"row": r, "head": h, "matched": m, "top_keys": list(self.top_keys[(r, h)])}
                      for (r, h), m in sorted(self.matched.items())],
        }


def _digit_positions(n: int, k: int) -> tuple[int, int]:
    """Token positions of D_k and D'_k."""
    return n - 1 - k, 2 * n - k


def detect_double_staircase(model: TransformerModel, questions: Sequence[dg.Question],
                            mass: float = STAIRCASE_MASS, template_heads: int = 3) -> StaircaseReport:
    """Match attention against the staircase template.

    In the row predicting ``A_j`` a head lagging ``o`` rows behind attends the
    pair ``(D_{j-o}, D'_{j-o})``. A (question, row, head) cell matches when
    that pair is the head's top-2 keys and holds at least ``mass`` of the row.
    Head lags are fitted over ``0..template_heads-1``.
    """
    cfg = model.cfg
    n, H = cfg.n_digits, cfg.n_heads
    tokens = _tokens(model, questions)
    pat = model.attention_patterns(tokens)  # [B, H, L, L]
    rows_by_digit = digit_rows(model)
    rows = [rows_by_digit[j] for j in range(n, -1, -1)]
    top2 = np.argsort(-pat, axis=-1, kind="stable")[..., :2]  # [B, H, L, 2]

    def cell_hits(j: int, h: int, o: int) -> np.ndarray | None:
        k = j - o
        if not 0 <= k < n:
            return None
        r = rows_by_digit[j]
        pa, pb = _digit_positions(n, k)
        keys = np.sort(top2[:, h, r], axis=-1)
        hit = (keys[:, 0] == min(pa, pb)) & (keys[:, 1] == max(pa, pb))
        return hit & (pat[:, h, r, pa] + pat[:, h, r, pb] >= mass)

    lags = range(template_heads)
    need = min(H, template_heads)
    best = None
    for assign in itertools.product(lags, repeat=H):
        if len(set(assign)) < need:
            continue
        cells = {}
        for h, o in enumerate(assign):
            for j in range(n, -1, -1):
                hits = cell_hits(j, h, o)
                if hits is not None:
                    cells[(rows_by_digit[j], h)] = float(hits.mean())
        # template cells a head set this small cannot fill count as misses
        missing = set(lags) - set(assign)
        n_missing = sum(1 for o in missing for j in range(n + 1) if 0 <= j - o < n)
        total = len(cells) + n_missing
        frac = sum(cells.values()) / total if total else 0.0
        if best is None or frac > best[0]:
            best = (frac, dict(enumerate(assign)), cells)
    frac, offsets, cells = best
    top_keys = {(r, h): tuple(int(x) for x in np.round(np.median(top2[:, h, r], axis=0)))
                for r in rows for h in range(H)}
    return StaircaseReport(rows, top_keys, cells, offsets, float(frac), partial=H < template_heads)


# ---------------------------------------------------------------- head roles

ROLES = ("BA", "MC1-carry", "lookback")


@dataclass
class HeadRoles:
    roles: dict[int, str]
    margins: dict[int, float]
    signals: dict[int, dict[str, float]]  # head -> loss increase per signal


def head_role_map(model: TransformerModel, questions: Sequence[dg.Question],
                  means: MeanStats | None = None, margin: float = ROLE_MARGIN) -> HeadRoles:
    """Assign BA / MC1-carry / lookback roles from per-head mean ablations.

    Signals are the ablation-induced loss increase on BA questions, on UC1
    answer digits and on US9 answer digits. Roles are handed out greedily in
    that order to the head with the largest signal; a head whose signal is
    under ``margin`` times the runner-up's is left "unresolved". The last
    head left over gets "lookback" if its ablation moves loss least overall.
    """
    means = means if means is not None else ablation_means(model, questions)
    base = evaluate(model, questions, decode=False)
    H = model.cfg.n_heads

    def signals(res) -> dict[str, float]:
        out = {}
        ba_q = [i for i, c in enumerate(res.categories) if c == "BA"]
        out["BA"] = float(res.question_loss[ba_q].mean() - base.question_loss[ba_q].mean()) if ba_q else 0.0
        for sig, task in (("MC1-carry", "UC1"), ("lookback", "US9")):
            cells = [(k, v) for k, v in res.by_digit_task.items() if k[1] == task]
            diffs = [v["loss"] - base.by_digit_task[k]["loss"] for k, v in cells]
            out[sig] = float(np.mean(diffs)) if diffs else 0.0
        out["total"] = float(res.loss - base.loss)
        return out

    sig = {}
    for h in range(H):
        spec = InterventionSpec("head_out", frozenset(range(model.cfg.n_ctx)), frozenset([h]),
                                mode="mean", mean_source=means)
        sig[h] = signals(evaluate(model, questions, spec, decode=False))

    roles: dict[int, str] = {}
    margins: dict[int, float] = {}
    free = list(range(H))
    for role in ("BA", "MC1-carry"):
        if not free:
            break
        ranked = sorted(free, key=lambda h: -sig[h][role])
        top = ranked[0]
        runner = sig[ranked[1]][role] if len(ranked) > 1 else 0.0
        m = sig[top][role] / max(runner, 1e-9) if sig[top][role] > 0 else 0.0
        margins[top] = m
        roles[top] = role if m >= margin else "unresolved"
        free.remove(top)
    for h in free:
        quiet = all(sig[h]["total"] <= sig[o]["total"] for o in range(H))
        roles[h] = "lookback" if quiet else "unresolved"
        margins[h] = min(sig[o]["total"] for o in range(H) if o != h) / max(sig[h]["total"], 1e-9)
    return HeadRoles(dict(sorted(roles.items())), margins, sig)


# ---------------------------------------------------------------- question sets


def analysis_questions(n: int, plus_prefix: bool = False, random_count: int = 64,
                       seed: int = 5, suite: bool = True) -> list[dg.Question]:
    """Random uniform questions plus (optionally) the curated suite."""
    cfg = dg.GeneratorConfig(n, seed, 0.0, plus_prefix)
    qs = dg.random_batch(cfg, random_count, np.random.default_rng(seed))
    if suite:
        qs += [q for q, _ in dg.make_test_suite(n)]
    return qs


def ba_questions(n: int, count: int = 128, seed: int = 8) -> list[dg.Question]:
    return dg.sample_category(n, "BA", count, np.random.default_rng(seed))


# ---------------------------------------------------------------- exports


def write_position_table(path, results: Sequence[AblationResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["token", "average_loss", "threshold", "important", "failure_groups"])
        for r in results:
            groups = "; ".join(f"{p}: {c}" for p, c in incorrect_only(r.failures)[:5])
            w.writerow([r.label, f"{r.loss:.6f}", r.threshold, int(r.important), groups])


def write_failure_table(path, rows: dict[int, list[tuple[str, int]]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "incorrect_answers_grouped"])
        for r, groups in sorted(rows.items()):
            w.writerow([r, "; ".join(f"{p}: {c}" for p, c in incorrect_only(groups))])


def write_head_table(path, results: Sequence[AblationResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ablated_head", "average_loss", "threshold", "important"])
        for r in results:
            w.writerow([r.label, f"{r.loss:.6f}", r.threshold, int(r.important)])


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
