"""Digit-pair sub-tasks of addition and the one-pass symbolic adder.

Digit arrays here are indexed by column (power of ten): ``a[..., 0]`` is the
units digit. :class:`~addlens.datagen.Question` stores digits most
significant first and converts through :func:`columns`.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Iterable

import numpy as np

CATEGORIES = ("BA", "MC1", "US9_simple", "US9_cascade")
DIGIT_TASKS = ("BA", "UC1", "US9")
MAX_ENUMERATE_DIGITS = 3

P_MAKE_CARRY = 0.45
P_MAKE_SUM9 = 0.10


@dataclass(frozen=True)
class DigitPair:
    a: int
    b: int

    def __post_init__(self):
        if not (0 <= self.a <= 9 and 0 <= self.b <= 9):
            raise ValueError(f"digits must be in [0, 9], got ({self.a}, {self.b})")


@dataclass(frozen=True)
class CarryChain:
    start: int
    length: int


# ---------------------------------------------------------------- base tasks


def ba(p: DigitPair) -> int:
    return (p.a + p.b) % 10


def mc1(p: DigitPair) -> bool:
    return p.a + p.b >= 10


def ms9(p: DigitPair) -> bool:
    return p.a + p.b == 9


def uc1(p: DigitPair, carry_in: int) -> int:
    if carry_in not in (0, 1):
        raise ValueError("carry_in must be 0 or 1")
    return (p.a + p.b + carry_in) % 10


# ---------------------------------------------------------------- vectorised core


def columns(q) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(a, b)`` column arrays (units first) for a Question."""
    return np.array(q.d[::-1], dtype=np.int64), np.array(q.d_prime[::-1], dtype=np.int64)


def carries_in(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact carry into each column ``0..n`` (shape ``[..., n+1]``)."""
    n = a.shape[-1]
    out = np.zeros(a.shape[:-1] + (n + 1,), dtype=np.int64)
    for i in range(n):
        out[..., i + 1] = (a[..., i] + b[..., i] + out[..., i]) >= 10
    return out


def true_sum_digits(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Column addition with full carry propagation; ``[..., n+1]``, units first."""
    c = carries_in(a, b)
    s = np.zeros_like(c)
    s[..., :-1] = (a + b + c[..., :-1]) % 10
    s[..., -1] = c[..., -1]
    return s


def model_algorithm_digits(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """The stateless per-digit adder with a two-column lookback.

    Each output digit looks only at its own column and the two below it, so
    a carry that must travel through two or more sum-9 columns is lost.
    The leading digit reuses the same lookback clause on columns n-1, n-2.
    """
    n = a.shape[-1]
    s = a + b
    out = np.zeros(a.shape[:-1] + (n + 1,), dtype=np.int64)
    zero = np.zeros(a.shape[:-1], dtype=np.int64)
    for pos in range(n + 1):
        here = s[..., pos] if pos < n else zero
        mc1_prev = (s[..., pos - 1] >= 10) if pos >= 1 else zero.astype(bool)
        ms9_prev = (s[..., pos - 1] == 9) if pos >= 1 else zero.astype(bool)
        mc1_pp = (s[..., pos - 2] >= 10) if pos >= 2 else zero.astype(bool)
        prev_prev = (~mc1_prev) & ms9_prev & mc1_pp
        out[..., pos] = (here + mc1_prev + prev_prev) % 10
    return out


def chain_lengths(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per column, the length of the carry chain the column belongs to (0 if none).

    A chain is a maximal run of consecutive sum-9 columns that receive a
    carry propagated from below.
    """
    n = a.shape[-1]
    s = a + b
    c = carries_in(a, b)
    in_chain = (s == 9) & (c[..., :n] == 1)
    run = np.zeros(a.shape, dtype=np.int64)
    for i in range(n):
        prev = run[..., i - 1] if i else 0
        run[..., i] = np.where(in_chain[..., i], prev + 1, 0)
    # propagate each run's final length back down over its members
    total = run.copy()
    for i in range(n - 2, -1, -1):
        total[..., i] = np.where(in_chain[..., i] & in_chain[..., i + 1], total[..., i + 1], total[..., i])
    return total


def max_chain_length(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return chain_lengths(a, b).max(axis=-1)


def categorize(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorised question category index into :data:`CATEGORIES`."""
    s = a + b
    any_carry = (s >= 10).any(axis=-1)
    longest = max_chain_length(a, b)
    cat = np.where(any_carry, 1, 0)
    cat = np.where(longest == 1, 2, cat)
    cat = np.where(longest >= 2, 3, cat)
    return cat


def digit_tasks(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per answer column ``0..n``, the index into :data:`DIGIT_TASKS`.

    US9 when the column is a sum-9 column receiving a carry, or when its
    carry arrived through one; UC1 when a carry arrives straight from the
    column below; BA otherwise.
    """
    n = a.shape[-1]
    s = a + b
    c = carries_in(a, b)
    s_ext = np.concatenate([s, np.zeros(a.shape[:-1] + (1,), dtype=np.int64)], axis=-1)
    out = np.zeros_like(c)
    for i in range(n + 1):
        has_carry = c[..., i] == 1
        self_chain = s_ext[..., i] == 9
        via_chain = (s_ext[..., i - 1] == 9) if i else np.zeros_like(has_carry)
        out[..., i] = np.where(has_carry, np.where(self_chain | via_chain, 2, 1), 0)
    return out


# ---------------------------------------------------------------- question level


def true_sum(q) -> tuple[int, ...]:
    """Answer digits ``A_n .. A_0`` (most significant first)."""
    a, b = columns(q)
    return tuple(int(x) for x in true_sum_digits(a, b)[::-1])


def model_algorithm(q) -> tuple[int, ...]:
    a, b = columns(q)
    return tuple(int(x) for x in model_algorithm_digits(a, b)[::-1])


def carry_chain_length(q, column: int) -> int:
    a, b = columns(q)
    if not 0 <= column < a.shape[-1]:
        raise IndexError(f"column {column} outside [0, {a.shape[-1]})")
    return int(chain_lengths(a, b)[column])


def carry_chains(q) -> list[CarryChain]:
    a, b = columns(q)
    lengths = chain_lengths(a, b)
    chains, i = [], 0
    while i < len(lengths):
        if lengths[i]:
            chains.append(CarryChain(start=i, length=int(lengths[i])))
            i += int(lengths[i])
        else:
            i += 1
    return chains


def enumerate_questions(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Every n-digit question as column arrays of shape ``[10**(2n), n]``."""
    total = 10 ** (2 * n)
    idx = np.arange(total, dtype=np.int64)
    x, y = idx // 10 ** n, idx % 10 ** n
    powers = 10 ** np.arange(n, dtype=np.int64)
    return (x[:, None] // powers) % 10, (y[:, None] // powers) % 10


@dataclass(frozen=True)
class Divergence:
    a: int
    b: int
    n: int
    true_answer: int
    algorithm_answer: int
    first_differing_digit: int
    chain_length: int


def _digits_to_int(cols: np.ndarray) -> np.ndarray:
    return (cols * 10 ** np.arange(cols.shape[-1], dtype=np.int64)).sum(axis=-1)


def divergence_set(n: int) -> list[Divergence]:
    """All n-digit questions the lookback adder gets wrong (full enumeration)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > MAX_ENUMERATE_DIGITS:
        raise ValueError(
            f"n={n} needs 10**{2 * n} questions; enumerate only up to n={MAX_ENUMERATE_DIGITS}, "
            "use sampled_divergences() for larger n")
    a, b = enumerate_questions(n)
    return _divergences(a, b)


def sampled_divergences(n: int, samples: int, seed: int = 0) -> list[Divergence]:
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 10, size=(samples, n))
    b = rng.integers(0, 10, size=(samples, n))
    return _divergences(a, b)


def _divergences(a: np.ndarray, b: np.ndarray) -> list[Divergence]:
    n = a.shape[-1]
    truth = true_sum_digits(a, b)
    algo = model_algorithm_digits(a, b)
    bad = np.nonzero((truth != algo).any(axis=-1))[0]
    chains = max_chain_length(a[bad], b[bad])
    ta, tb = _digits_to_int(a[bad]), _digits_to_int(b[bad])
    tt, aa = _digits_to_int(truth[bad]), _digits_to_int(algo[bad])
    out = []
    for k, row in enumerate(bad):
        diff = np.nonzero(truth[row] != algo[row])[0]
        out.append(Divergence(int(ta[k]), int(tb[k]), n, int(tt[k]), int(aa[k]),
                              int(diff.max()), int(chains[k])))
    return out


def write_divergence_csv(path, rows: Iterable[Divergence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["question_a", "question_b", "true_answer", "algorithm_answer", "chain_length"])
        for r in rows:
            w.writerow([str(r.a).zfill(r.n), str(r.b).zfill(r.n),
                        str(r.true_answer).zfill(r.n + 1), str(r.algorithm_answer).zfill(r.n + 1),
                        r.chain_length])


# ---------------------------------------------------------------- frequencies


def column_frequencies() -> dict[str, float]:
    pairs = list(itertools.product(range(10), repeat=2))
    return {
        "MC1": sum(mc1(DigitPair(x, y)) for x, y in pairs) / len(pairs),
        "MS9": sum(ms9(DigitPair(x, y)) for x, y in pairs) / len(pairs),
        "BA_only": sum((x + y) < 9 for x, y in pairs) / len(pairs),
    }


def task_frequencies(n: int) -> dict[str, float]:
    """Exact category probabilities for uniformly drawn n-digit questions.

    Scans columns upward tracking (carry, current chain length capped at 2,
    any carry made, longest chain capped at 2); each column pair is one of
    three kinds: makes a carry (45/100), sums to 9 (10/100), or neither.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    kinds = column_frequencies()
    p_carry, p_nine = kinds["MC1"], kinds["MS9"]
    p_low = 1.0 - p_carry - p_nine
    # state: (carry_out, run, made_carry, longest)
    dist = {(0, 0, False, 0): 1.0}
    for _ in range(n):
        nxt: dict[tuple, float] = {}
        for (carry, run, made, longest), p in dist.items():
            for kind, pk in (("carry", p_carry), ("nine", p_nine), ("low", p_low)):
                if kind == "carry":
                    key = (1, 0, True, longest)
                elif kind == "nine":
                    if carry:
                        r = min(run + 1, 2)
                        key = (1, r, made, max(longest, r))
                    else:
                        key = (0, 0, made, longest)
                else:
                    key = (0, 0, made, longest)
                nxt[key] = nxt.get(key, 0.0) + p * pk
        dist = nxt
    out = dict.fromkeys(CATEGORIES, 0.0)
    for (_, _, made, longest), p in dist.items():
        if longest >= 2:
            out["US9_cascade"] += p
        elif longest == 1:
            out["US9_simple"] += p
        elif made:
            out["MC1"] += p
        else:
            out["BA"] += p
    return out
