"""Training loop on fresh batches with per-digit / per-task loss bookkeeping."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import datagen as dg
from . import framework as fw
from . import numerics as nx
from .model import NO_DECAY, ModelConfig, TransformerModel, save_checkpoint

log = logging.getLogger(__name__)

QUESTION_GROUPS = ("BA", "MC1", "US9")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, last_record: "LossRecord | None"):
        self.step = step
        self.last_record = last_record
        last = f"{last_record.all_digits:.4f} at step {last_record.step}" if last_record else "none"
        super().__init__(f"non-finite loss at step {step}; last finite record: {last}")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: dg.GeneratorConfig = field(default_factory=dg.GeneratorConfig)
    steps: int = 5000
    batch_size: int = 64
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1
    schedule: str = "cosine"  # or "constant"; warmup is linear either way, cosine decays to min_lr_ratio * lr
    warmup_steps: int = 100
    min_lr_ratio: float = 0.1
    log_every: int = 10
    checkpoint: str | None = None
    loss_csv: str | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.model.n_digits != self.data.n_digits or self.model.plus_prefix != self.data.plus_prefix:
            raise ValueError("model and data configs disagree on n_digits / plus_prefix")


@dataclass
class LossRecord:
    step: int
    per_digit: list[float]  # most significant answer token first
    per_category: dict[str, float]
    per_digit_per_task: dict[tuple[int, str], float]
    all_digits: float

    def digit(self, j: int) -> float:
        """Loss of answer digit ``A_j`` (``j = 0`` is units)."""
        return self.per_digit[len(self.per_digit) - 1 - j]


# ---------------------------------------------------------------- losses


def answer_slice(n: int, plus_prefix: bool) -> tuple[int, int]:
    start = dg.answer_start(n)
    return start, start + dg.answer_len(n, plus_prefix)


def per_token_nll(logits, tokens: np.ndarray, n: int, plus_prefix: bool):
    """NLL of every answer token at the position that predicts it.

    ``logits`` may be a Tensor (differentiable) or an array; returns ``[B, A]``.
    """
    lo, hi = answer_slice(n, plus_prefix)
    if tokens.shape[1] < hi:
        raise ValueError(f"token sequences of length {tokens.shape[1]} lack answer positions up to {hi}")
    targets = tokens[:, lo:hi]
    if isinstance(logits, nx.Tensor):
        if logits.shape[1] < hi - 1:
            raise ValueError("logits do not cover every answer-predicting position")
        return nx.cross_entropy(logits[:, lo - 1:hi - 1], targets)
    if logits.shape[1] < hi - 1:
        raise ValueError("logits do not cover every answer-predicting position")
    logp = nx.log_softmax(logits[:, lo - 1:hi - 1])
    return -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]


def per_digit_loss(logits, tokens, n: int, plus_prefix: bool = False) -> np.ndarray:
    """Batch-mean NLL per answer token, most significant first."""
    nll = per_token_nll(np.asarray(logits), np.asarray(tokens), n, plus_prefix)
    return nll.mean(axis=0)


def make_record(step: int, nll: np.ndarray, a: np.ndarray, b: np.ndarray) -> LossRecord:
    per_digit = nll.mean(axis=0)
    n = a.shape[1]
    cats = fw.categorize(a, b)
    groups = {"BA": cats == 0, "MC1": cats == 1, "US9": cats >= 2}
    q_loss = nll.mean(axis=1)
    per_category = {k: float(q_loss[m].mean()) if m.any() else math.nan for k, m in groups.items()}
    tasks = fw.digit_tasks(a, b)  # [B, n+1], units first
    off = nll.shape[1] - (n + 1)
    cells = {}
    for j in range(n + 1):
        col = nll[:, off + n - j]
        for t_idx, t in enumerate(fw.DIGIT_TASKS):
            m = tasks[:, j] == t_idx
            cells[(j, t)] = float(col[m].mean()) if m.any() else math.nan
    return LossRecord(step, [float(x) for x in per_digit], per_category, cells, float(per_digit.mean()))


# ---------------------------------------------------------------- training


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for 1-based ``step``."""
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if cfg.schedule == "constant":
        return cfg.lr
    span = max(cfg.steps - cfg.warmup_steps, 1)
    frac = min(max(step - cfg.warmup_steps, 0) / span, 1.0)
    return cfg.lr * (cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


def loss_and_grads(model: TransformerModel, tokens: np.ndarray):
    cfg = model.cfg
    for p in model.params.values():
        p.zero_grad()
    with nx.recording() as tape:
        logits, _ = model.run(tokens)
        nll = per_token_nll(logits, tokens, cfg.n_digits, cfg.plus_prefix)
        loss = nll.mean()
    if not np.isfinite(loss.data):
        return nll.data, None
    nx.backward(loss, tape)
    grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
    return nll.data, grads


def train(cfg: TrainConfig, model: TransformerModel | None = None,
          progress: bool = False) -> tuple[TransformerModel, list[LossRecord]]:
    """Train on a fresh batch every step; deterministic given the seeds in ``cfg``."""
    model = model if model is not None else TransformerModel(cfg.model)
    opt = nx.OptimizerState.for_params(model.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                                       eps=cfg.eps, weight_decay=cfg.weight_decay)
    decay = set(model.params) - NO_DECAY
    rng = np.random.default_rng(cfg.data.seed)
    records: list[LossRecord] = []
    writer = LossCsvWriter(cfg.loss_csv, cfg.model.n_digits, cfg.model.plus_prefix) if cfg.loss_csv else None
    iterator = range(1, cfg.steps + 1)
    if progress:
        from tqdm import tqdm

        iterator = tqdm(iterator, desc="train", mininterval=5)
    try:
        for step in iterator:
            a, b = dg.random_arrays(cfg.data, cfg.batch_size, rng)
            tokens = dg.tokens_from_arrays(a, b, cfg.data.plus_prefix)
            nll, grads = loss_and_grads(model, tokens)
            if grads is None:
                raise TrainingDiverged(step, records[-1] if records else None)
            opt.lr = lr_at(cfg, step)
            try:
                nx.adam_step(model.params, grads, opt, decay)
            except nx.NonFiniteGradient as exc:
                raise TrainingDiverged(step, records[-1] if records else None) from exc
            model.step = step
            if step % cfg.log_every == 0 or step == cfg.steps:
                rec = make_record(step, nll, a, b)
                records.append(rec)
                if writer:
                    writer.write(rec)
                if step % (cfg.log_every * 50) == 0:
                    log.info("step %d loss %.4f", step, rec.all_digits)
    finally:
        if writer:
            writer.close()
    if cfg.checkpoint:
        save_checkpoint(model, cfg.checkpoint)
    return model, records


def smoothed(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return v
    out = np.empty_like(v)
    for i in range(len(v)):
        seg = v[max(0, i - window + 1):i + 1]
        seg = seg[np.isfinite(seg)]
        out[i] = seg.mean() if seg.size else np.nan
    return out


def first_step_below(records: Sequence[LossRecord], values: Sequence[float], threshold: float,
                     window: int = 1) -> int | None:
    s = smoothed(values, window)
    for rec, x in zip(records, s):
        if np.isfinite(x) and x < threshold:
            return rec.step
    return None


def phase_boundaries(records: Sequence[LossRecord], window: int = 10) -> dict[str, int | None]:
    """Descriptive memorise/discover/clean-up split from the smoothed all-digit curve.

    Discovery starts where the smoothed loss falls fastest relative to its
    level ahead of that point and ends where the drop rate flattens out.
    """
    if len(records) < 3:
        return {"discovery_start": None, "cleanup_start": None}
    y = np.log(np.maximum(smoothed([r.all_digits for r in records], window), 1e-12))
    slope = np.gradient(y)
    steepest = int(np.argmin(slope))
    thresh = 0.2 * slope[steepest]
    start = steepest
    while start > 0 and slope[start - 1] < thresh:
        start -= 1
    end = steepest
    while end < len(slope) - 1 and slope[end + 1] < thresh:
        end += 1
    return {"discovery_start": records[start].step, "cleanup_start": records[end].step}


# ---------------------------------------------------------------- csv


def csv_columns(n: int, plus_prefix: bool) -> list[str]:
    cols = ["step", "loss_all"] + [f"loss_d{j}" for j in range(n + 1)]
    if plus_prefix:
        cols.append("loss_plus")
    cols += [f"loss_{g}" for g in QUESTION_GROUPS]
    cols += [f"loss_d{j}_{t}" for j in range(n + 1) for t in fw.DIGIT_TASKS]
    return cols


def record_row(rec: LossRecord, n: int, plus_prefix: bool) -> list:
    def fmt(x):
        return "" if x is None or not np.isfinite(x) else repr(float(x))

    row = [rec.step, fmt(rec.all_digits)] + [fmt(rec.digit(j)) for j in range(n + 1)]
    if plus_prefix:
        row.append(fmt(rec.per_digit[0]))
    row += [fmt(rec.per_category[g]) for g in QUESTION_GROUPS]
    row += [fmt(rec.per_digit_per_task[(j, t)]) for j in range(n + 1) for t in fw.DIGIT_TASKS]
    return row


class LossCsvWriter:
    def __init__(self, path, n: int, plus_prefix: bool):
        self.n, self.plus = n, plus_prefix
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(csv_columns(n, plus_prefix))

    def write(self, rec: LossRecord) -> None:
        self._w.writerow(record_row(rec, self.n, self.plus))
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_loss_csv(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: (float(v) if v != "" else math.nan) for k, v in row.items()}
                for row in csv.DictReader(fh)]


# ---------------------------------------------------------------- evaluation


def _batched(n_items: int, size: int):
    for i in range(0, n_items, size):
        yield slice(i, min(i + size, n_items))


def teacher_forced_nll(model: TransformerModel, tokens: np.ndarray, interventions=None,
                       batch: int = 512) -> np.ndarray:
    cfg = model.cfg
    out = []
    for sl in _batched(len(tokens), batch):
        with nx.no_grad():
            logits, _ = model.run(tokens[sl], interventions=interventions)
        out.append(per_token_nll(logits.data, tokens[sl], cfg.n_digits, cfg.plus_prefix))
    return np.concatenate(out)


def greedy_decode(model: TransformerModel, tokens: np.ndarray, interventions=None,
                  batch: int = 512) -> np.ndarray:
    """Autoregressively predict the answer tokens; returns ``[N, A]`` token ids."""
    cfg = model.cfg
    lo, hi = answer_slice(cfg.n_digits, cfg.plus_prefix)
    out = []
    for sl in _batched(len(tokens), batch):
        seq = tokens[sl].copy()
        seq[:, lo:hi] = 0
        for pos in range(lo, hi):
            with nx.no_grad():
                logits, _ = model.run(seq[:, :pos], interventions=interventions)
            seq[:, pos] = logits.data[:, pos - 1].argmax(axis=-1)
        out.append(seq[:, lo:hi])
    return np.concatenate(out)


@dataclass
class EvalResult:
    question_loss: np.ndarray  # [N] all-digit loss per question
    token_loss: np.ndarray  # [N, A]
    correct: np.ndarray  # [N] exact match
    digit_correct: np.ndarray  # [N, A]
    categories: list[str]
    by_category: dict[str, dict[str, float]]
    by_digit_task: dict[tuple[int, str], dict[str, float]]

    @property
    def loss(self) -> float:
        return float(self.question_loss.mean())

    @property
    def accuracy(self) -> float:
        return float(self.correct.mean())


def evaluate(model: TransformerModel, questions: Sequence[dg.Question], interventions=None,
             decode: bool = True) -> EvalResult:
    cfg = model.cfg
    if not questions:
        raise ValueError("no questions to evaluate")
    a, b = dg.to_arrays(questions)
    tokens = dg.tokens_from_arrays(a, b, cfg.plus_prefix)
    nll = teacher_forced_nll(model, tokens, interventions)
    lo, hi = answer_slice(cfg.n_digits, cfg.plus_prefix)
    if decode:
        pred = greedy_decode(model, tokens, interventions)
    else:
        with nx.no_grad():
            logits, _ = model.run(tokens, interventions=interventions)
        pred = logits.data[:, lo - 1:hi - 1].argmax(axis=-1)
    digit_ok = pred == tokens[:, lo:hi]
    correct = digit_ok.all(axis=1)
    cats = [fw.CATEGORIES[c] for c in fw.categorize(a, b)]
    q_loss = nll.mean(axis=1)
    by_cat = {}
    for c in fw.CATEGORIES:
        m = np.array([x == c for x in cats])
        if m.any():
            by_cat[c] = {"count": int(m.sum()), "loss": float(q_loss[m].mean()),
                         "accuracy": float(correct[m].mean())}
    tasks = fw.digit_tasks(a, b)
    off = nll.shape[1] - (cfg.n_digits + 1)
    by_task = {}
    for j in range(cfg.n_digits + 1):
        k = off + cfg.n_digits - j
        for t_idx, t in enumerate(fw.DIGIT_TASKS):
            m = tasks[:, j] == t_idx
            if m.any():
                by_task[(j, t)] = {"count": int(m.sum()), "loss": float(nll[m, k].mean()),
                                   "accuracy": float(digit_ok[m, k].mean())}
    return EvalResult(q_loss, nll, correct, digit_ok, cats, by_cat, by_task)
