"""Addition questions: generation, tokenization, classification, file I/O."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import framework as fw

PLUS, EQUALS = 10, 11
VOCAB = {**{str(i): i for i in range(10)}, "+": PLUS, "=": EQUALS}
ID_TO_CHAR = {v: k for k, v in VOCAB.items()}
VOCAB_SIZE = 12

SUITE_LABELS = {
    "BA": "BASE_ADD",
    "MC1": "USE_CARRY_1",
    "US9_simple": "SIMPLE_US9",
    "US9_cascade": "CASCADE_US9",
}
LABEL_TO_CATEGORY = {v: k for k, v in SUITE_LABELS.items()}


@dataclass(frozen=True)
class Question:
    """Two n-digit operands, digits stored most significant first."""

    d: tuple[int, ...]
    d_prime: tuple[int, ...]

    def __post_init__(self):
        if len(self.d) != len(self.d_prime) or not self.d:
            raise ValueError("operands must have the same, non-zero digit count")
        if any(not 0 <= x <= 9 for x in self.d + self.d_prime):
            raise ValueError("digits must be in [0, 9]")

    @property
    def n(self) -> int:
        return len(self.d)

    @classmethod
    def from_ints(cls, a: int, b: int, n: int) -> "Question":
        if not (0 <= a < 10 ** n and 0 <= b < 10 ** n):
            raise ValueError(f"operands must fit in {n} digits")
        return cls(tuple(int(c) for c in str(a).zfill(n)), tuple(int(c) for c in str(b).zfill(n)))

    @classmethod
    def parse(cls, text: str) -> "Question":
        left, _, right = text.strip().partition("+")
        if not right or not left.isdigit() or not right.isdigit() or len(left) != len(right):
            raise ValueError(f"cannot parse question {text!r}; expected DDDDD+DDDDD")
        return cls(tuple(map(int, left)), tuple(map(int, right)))

    @property
    def a(self) -> int:
        return int("".join(map(str, self.d)))

    @property
    def b(self) -> int:
        return int("".join(map(str, self.d_prime)))

    def __str__(self) -> str:
        return "".join(map(str, self.d)) + "+" + "".join(map(str, self.d_prime))


@dataclass(frozen=True)
class GeneratorConfig:
    n_digits: int = 5
    seed: int = 0
    enrichment_prob: float = 0.01
    plus_prefix: bool = False

    def __post_init__(self):
        if self.n_digits < 1:
            raise ValueError("n_digits must be >= 1")
        if not 0.0 <= self.enrichment_prob <= 1.0:
            raise ValueError("enrichment_prob must lie in [0, 1]")


# ---------------------------------------------------------------- layout


def seq_len(n: int, plus_prefix: bool = False) -> int:
    return 3 * n + 3 + int(plus_prefix)


def answer_len(n: int, plus_prefix: bool = False) -> int:
    return n + 1 + int(plus_prefix)


def answer_start(n: int) -> int:
    """Index of the first answer token (right after '=')."""
    return 2 * n + 2


def tokenize(q: Question, plus_prefix: bool = False) -> np.ndarray:
    ans = list(fw.true_sum(q))
    prefix = [PLUS] if plus_prefix else []
    return np.array(list(q.d) + [PLUS] + list(q.d_prime) + [EQUALS] + prefix + ans, dtype=np.int64)


def detokenize(tokens: Sequence[int]) -> tuple[Question, tuple[int, ...]]:
    """Inverse of :func:`tokenize`; returns the question and the answer digits."""
    tokens = [int(t) for t in tokens]
    try:
        plus = tokens.index(PLUS)
        eq = tokens.index(EQUALS)
    except ValueError as exc:
        raise ValueError("token sequence lacks '+' or '='") from exc
    q = Question(tuple(tokens[:plus]), tuple(tokens[plus + 1:eq]))
    ans = tokens[eq + 1:]
    if ans and ans[0] == PLUS:
        ans = ans[1:]
    return q, tuple(ans)


def render(tokens: Iterable[int]) -> str:
    return "".join(ID_TO_CHAR[int(t)] for t in tokens)


def to_arrays(questions: Sequence[Question]) -> tuple[np.ndarray, np.ndarray]:
    """Stack questions into column arrays (units first), shape ``[N, n]``."""
    if not questions:
        raise ValueError("empty question list")
    n = questions[0].n
    if any(q.n != n for q in questions):
        raise ValueError("questions have mixed digit counts")
    a = np.array([q.d[::-1] for q in questions], dtype=np.int64)
    b = np.array([q.d_prime[::-1] for q in questions], dtype=np.int64)
    return a, b


def tokenize_batch(questions: Sequence[Question], plus_prefix: bool = False) -> np.ndarray:
    a, b = to_arrays(questions)
    return tokens_from_arrays(a, b, plus_prefix)


def tokens_from_arrays(a: np.ndarray, b: np.ndarray, plus_prefix: bool = False) -> np.ndarray:
    n_q, n = a.shape
    ans = fw.true_sum_digits(a, b)[:, ::-1]
    parts = [a[:, ::-1], np.full((n_q, 1), PLUS), b[:, ::-1], np.full((n_q, 1), EQUALS)]
    if plus_prefix:
        parts.append(np.full((n_q, 1), PLUS))
    parts.append(ans)
    return np.concatenate(parts, axis=1).astype(np.int64)


def questions_from_arrays(a: np.ndarray, b: np.ndarray) -> list[Question]:
    return [Question(tuple(int(x) for x in ra[::-1]), tuple(int(x) for x in rb[::-1]))
            for ra, rb in zip(a, b)]


# ---------------------------------------------------------------- classification


def classify_question(q: Question) -> str:
    a, b = fw.columns(q)
    return fw.CATEGORIES[int(fw.categorize(a, b))]


def classify_digit(q: Question, i: int) -> str:
    """Task needed for answer column ``i`` (0 = units; ``i == n`` is the leading digit)."""
    if not 0 <= i <= q.n:
        raise IndexError(f"digit index {i} outside [0, {q.n}]")
    a, b = fw.columns(q)
    return fw.DIGIT_TASKS[int(fw.digit_tasks(a, b)[i])]


# ---------------------------------------------------------------- sampling


def _chain_question(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform digits, then plant a carry feeding a run of sum-9 columns."""
    a = rng.integers(0, 10, size=n)
    b = rng.integers(0, 10, size=n)
    length = int(rng.integers(1, min(4, n - 1) + 1))
    start = int(rng.integers(1, n - length + 1))
    # column below the chain makes a carry
    lo = int(rng.integers(1, 10))
    a[start - 1] = lo
    b[start - 1] = int(rng.integers(10 - lo, 10))
    for col in range(start, start + length):
        x = int(rng.integers(0, 10))
        a[col], b[col] = x, 9 - x
    return a, b


def random_arrays(cfg: GeneratorConfig, batch_size: int,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = cfg.n_digits
    a = rng.integers(0, 10, size=(batch_size, n))
    b = rng.integers(0, 10, size=(batch_size, n))
    if cfg.enrichment_prob > 0 and n >= 2:
        planted = np.nonzero(rng.random(batch_size) < cfg.enrichment_prob)[0]
        for k in planted:
            a[k], b[k] = _chain_question(n, rng)
    return a, b


def random_batch(cfg: GeneratorConfig, batch_size: int,
                 rng: np.random.Generator | None = None) -> list[Question]:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return questions_from_arrays(*random_arrays(cfg, batch_size, rng))


def sample_category(n: int, category: str, count: int, rng: np.random.Generator) -> list[Question]:
    """Rejection-sample ``count`` uniform questions of one category."""
    want = fw.CATEGORIES.index(category)
    found_a, found_b, have = [], [], 0
    while have < count:
        a = rng.integers(0, 10, size=(4096, n))
        b = rng.integers(0, 10, size=(4096, n))
        if category == "US9_cascade" and n >= 3:
            extra = [_chain_question(n, rng) for _ in range(512)]
            a = np.concatenate([a, np.array([e[0] for e in extra])])
            b = np.concatenate([b, np.array([e[1] for e in extra])])
        keep = fw.categorize(a, b) == want
        found_a.append(a[keep])
        found_b.append(b[keep])
        have += int(keep.sum())
    return questions_from_arrays(np.concatenate(found_a)[:count], np.concatenate(found_b)[:count])


# ---------------------------------------------------------------- curated suite

LANDMARK_CASES_5 = [
    (888, 11111, "BA"),
    (35000, 35000, "MC1"),
    (15020, 45091, "MC1"),
    (25, 79, "US9_simple"),
    (41127, 10880, "US9_simple"),
    (123, 877, "US9_cascade"),
    (81818, 18182, "US9_cascade"),
]


def make_test_suite(n_digits: int, seed: int = 1234) -> list[tuple[Question, str]]:
    """Hand-built questions covering every category at every answer digit.

    Returns ``(question, category)`` pairs; categories always agree with
    :func:`classify_question`.
    """
    n = n_digits
    if n < 2:
        raise ValueError("n_digits must be >= 2")
    rng = np.random.default_rng(seed)
    out: list[Question] = []

    def add(a_cols, b_cols):
        out.append(questions_from_arrays(np.array([a_cols]), np.array([b_cols]))[0])

    def base(rng_):
        # digit pairs summing to at most 8: no carries anywhere
        a = rng_.integers(0, 5, size=n)
        b = rng_.integers(0, 5, size=n)
        return a, b

    # BA: base questions with a large pair sum (8) at each column
    for col in range(n):
        for _ in range(3):
            a, b = base(rng)
            a[col], b[col] = 4 + int(rng.integers(0, 5)), 0
            b[col] = 8 - a[col]
            add(a, b)
    # MC1 / UC1 at each column pair (carry made at col, used at col+1)
    for col in range(n):
        for _ in range(3):
            a, b = base(rng)
            x = int(rng.integers(1, 10))
            a[col], b[col] = x, int(rng.integers(10 - x, 10))
            add(a, b)
    # simple US9 ending at each column
    for top in range(1, n):
        for _ in range(3):
            a, b = base(rng)
            x = int(rng.integers(1, 10))
            a[top - 1], b[top - 1] = x, int(rng.integers(10 - x, 10))
            y = int(rng.integers(0, 10))
            a[top], b[top] = y, 9 - y
            add(a, b)
    # cascades of every length reaching each column
    for length in range(2, n):
        for start in range(1, n - length + 1):
            for _ in range(3):
                a, b = base(rng)
                x = int(rng.integers(1, 10))
                a[start - 1], b[start - 1] = x, int(rng.integers(10 - x, 10))
                for col in range(start, start + length):
                    y = int(rng.integers(0, 10))
                    a[col], b[col] = y, 9 - y
                add(a, b)
    if n == 5:
        for x, y, _ in LANDMARK_CASES_5:
            out.append(Question.from_ints(x, y, 5))
    # pad with random questions of the rarer categories until >= 100
    while len(out) < 100:
        for cat in ("MC1", "US9_simple", "US9_cascade" if n >= 3 else "US9_simple"):
            out.extend(sample_category(n, cat, 1, rng))
    return [(q, classify_question(q)) for q in out]


# ---------------------------------------------------------------- file format


def write_questions(path, items: Iterable[Question | tuple[Question, str]]) -> None:
    with open(path, "w") as fh:
        for item in items:
            if isinstance(item, tuple):
                q, cat = item
                fh.write(f"{q} #{SUITE_LABELS.get(cat, cat)}\n")
            else:
                fh.write(f"{item}\n")


def read_questions(path) -> list[tuple[Question, str | None]]:
    """Parse a question-list file; category is None when not annotated."""
    out = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        body, _, comment = raw.partition("#")
        body = body.strip()
        if not body:
            continue
        try:
            q = Question.parse(body)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
        label = comment.strip() or None
        out.append((q, LABEL_TO_CATEGORY.get(label, label) if label else None))
    return out
