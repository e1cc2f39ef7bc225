"""Memorization scores, bin schemes, histograms and transition matrices.

Scores are kept as exact rationals (match count over continuation length) so
bin assignment at edges like 0.5 never depends on float rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyInput,
    EmptyTraceSet,
    InvalidParts,
    KeySetMismatch,
    LengthMismatch,
)
from .traces import GenerationTrace, TraceSet

WIDTH_ONE_TENTH = 0.1
WIDTH_ONE_FIFTH = 0.2
FIVE_BIN_LABELS = ("very_low", "low", "medium", "high", "very_high")

ScorePredicate = Callable[["MemorizationScore"], bool]


@dataclass(frozen=True)
class MemorizationScore:
    """Exact fraction of continuation positions the model reproduced."""

    matches: int
    length: int

    def __post_init__(self):
        if self.length < 1:
            raise LengthMismatch("score needs a continuation of length >= 1")
        if not 0 <= self.matches <= self.length:
            raise LengthMismatch(
                f"match count {self.matches} outside [0, {self.length}]")

    @property
    def value(self) -> float:
        return self.matches / self.length

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.matches, self.length)

    def __float__(self) -> float:
        return self.value


def memorization_score(generated: Sequence[int], truth: Sequence[int]) -> MemorizationScore:
    """Position-wise match fraction; 1 means the continuation is extractable."""

    if len(generated) != len(truth):
        raise LengthMismatch(
            f"generated has {len(generated)} tokens, truth has {len(truth)}")
    if len(truth) < 1:
        raise LengthMismatch("cannot score an empty continuation")
    matches = sum(1 for g, t in zip(generated, truth) if g == t)
    return MemorizationScore(matches, len(truth))


def score_trace(trace: GenerationTrace) -> MemorizationScore:
    return memorization_score(trace.generated_continuation, trace.true_continuation)


def score_map(traces: Iterable[GenerationTrace]) -> dict[str, MemorizationScore]:
    return {t.sequence_id: score_trace(t) for t in traces}


@dataclass(frozen=True)
class MemorizationBinning:
    """Half-open bins [i*w, (i+1)*w) over [0, 1]; the top bin is closed at 1."""

    width: float
    labels: tuple[str, ...]

    def __post_init__(self):
        if self.width not in (WIDTH_ONE_TENTH, WIDTH_ONE_FIFTH):
            raise EmptyInput(f"bin width must be 0.1 or 0.2, got {self.width}")
        if len(self.labels) != self.n_bins:
            raise EmptyInput(
                f"{len(self.labels)} labels for {self.n_bins} bins")

    @classmethod
    def from_width(cls, width: float) -> "MemorizationBinning":
        n = round(1.0 / width)
        if n == 5:
            labels = FIVE_BIN_LABELS
        else:
            labels = tuple(f"bin{i}" for i in range(n))
        return cls(width=width, labels=labels)

    @property
    def n_bins(self) -> int:
        return round(1.0 / self.width)

    def bin_index(self, score: MemorizationScore | float) -> int:
        n = self.n_bins
        if isinstance(score, MemorizationScore):
            idx = (score.matches * n) // score.length
        else:
            if not 0.0 <= score <= 1.0:
                raise EmptyInput(f"score {score} outside [0, 1]")
            idx = int(score * n)
        return min(idx, n - 1)

    def bin_label(self, score: MemorizationScore | float) -> str:
        return self.labels[self.bin_index(score)]

    def edges(self, i: int) -> tuple[float, float]:
        return i * self.width, (i + 1) * self.width


def bin_score(score: MemorizationScore | float, scheme: MemorizationBinning) -> str:
    """Label of the bin containing the score; 1.0 maps into the top bin."""

    return scheme.bin_label(score)


def histogram_by_bin(traces: TraceSet, scheme: MemorizationBinning) -> list[int]:
    """Trace counts per bin; the counts always partition len(traces)."""

    if len(traces) == 0:
        raise EmptyTraceSet("cannot histogram an empty trace set")
    counts = [0] * scheme.n_bins
    for trace in traces:
        counts[scheme.bin_index(score_trace(trace))] += 1
    return counts


def aggregate_counts(
    keyed_sets: Mapping[tuple, TraceSet],
    predicate: ScorePredicate,
) -> list[tuple[tuple, int]]:
    """Count predicate-satisfying traces per (model, context_len, continuation_len) key.

    Rows come back sorted by key for reproducible tables.
    """

    rows = []
    for key in sorted(keyed_sets):
        tset = keyed_sets[key]
        if len(tset) == 0:
            raise EmptyTraceSet(f"trace set for key {key!r} is empty")
        rows.append((key, sum(1 for t in tset if predicate(score_trace(t)))))
    return rows


@dataclass(frozen=True)
class TransitionMatrix:
    """Bin-to-bin sequence counts between two scorings of the same sequences."""

    scheme: MemorizationBinning
    counts: np.ndarray
    row_normalized: np.ndarray
    empty_rows: tuple[int, ...]


def transition_matrix(
    scores_small: Mapping[str, MemorizationScore],
    scores_large: Mapping[str, MemorizationScore],
    scheme: MemorizationBinning,
) -> TransitionMatrix:
    """counts[a][b] = sequences in bin a under the first scoring, bin b under the second."""

    if not scores_small or not scores_large:
        raise EmptyInput("both score maps must be non-empty")
    if set(scores_small) != set(scores_large):
        only_a = sorted(set(scores_small) - set(scores_large))[:3]
        only_b = sorted(set(scores_large) - set(scores_small))[:3]
        raise KeySetMismatch(
            f"score maps cover different sequences (e.g. {only_a or only_b})")
    n = scheme.n_bins
    counts = np.zeros((n, n), dtype=np.int64)
    for seq_id, small in scores_small.items():
        a = scheme.bin_index(small)
        b = scheme.bin_index(scores_large[seq_id])
        counts[a, b] += 1
    row_sums = counts.sum(axis=1)
    normalized = np.zeros((n, n), dtype=np.float64)
    nonzero = row_sums > 0
    normalized[nonzero] = counts[nonzero] / row_sums[nonzero, None]
    empty = tuple(int(i) for i in np.flatnonzero(~nonzero))
    return TransitionMatrix(scheme, counts, normalized, empty)


def corpus_position_histogram(
    traces: TraceSet,
    parts: int = 50,
    predicate: ScorePredicate | None = None,
    max_index: int | None = None,
) -> list[int]:
    """Counts of predicate-satisfying traces over `parts` equal corpus-index ranges.

    [0, max_index] splits into equal-width ranges; the last range absorbs any
    remainder, so the counts always sum to the number of satisfying traces.
    """

    if parts < 1:
        raise InvalidParts(f"parts must be >= 1, got {parts}")
    if len(traces) == 0:
        raise EmptyTraceSet("cannot partition an empty trace set")
    if max_index is None:
        max_index = max(t.corpus_index for t in traces)
    width = max(1, (max_index + 1) // parts)
    counts = [0] * parts
    for trace in traces:
        if predicate is not None and not predicate(score_trace(trace)):
            continue
        counts[min(trace.corpus_index // width, parts - 1)] += 1
    return counts


# --- cohorts and predicates ----------------------------------------------------

def is_fully_memorized(score: MemorizationScore) -> bool:
    return score.matches == score.length


def is_unmemorized(score: MemorizationScore) -> bool:
    return score.matches == 0


def cohort_label(score: MemorizationScore) -> str | None:
    """Exact-fraction cohort of a score, or None if it belongs to no cohort."""

    frac = score.fraction
    if frac == 1:
        return "memorized"
    if frac == 0:
        return "unmemorized"
    if frac == Fraction(1, 2):
        return "half"
    if frac == Fraction(1, 4):
        return "quarter"
    return None


def split_cohorts(
    traces: Iterable[GenerationTrace],
    cohorts: Sequence[str] = ("memorized", "half", "unmemorized"),
) -> dict[str, list[GenerationTrace]]:
    """Group traces into the requested exact-score cohorts, preserving order."""

    wanted = set(cohorts)
    groups: dict[str, list[GenerationTrace]] = {name: [] for name in cohorts}
    for trace in traces:
        name = cohort_label(score_trace(trace))
        if name in wanted:
            groups[name].append(trace)
    return groups


def parse_predicate(text: str) -> ScorePredicate:
    """Parse a CLI predicate: 'any', 'full', 'zero', or ge:/gt:/le:/lt:/eq:<fraction>."""

    if text == "any":
        return lambda s: True
    if text == "full":
        return is_fully_memorized
    if text == "zero":
        return is_unmemorized
    for prefix, op in (
        ("ge:", lambda f: lambda s: s.fraction >= f),
        ("gt:", lambda f: lambda s: s.fraction > f),
        ("le:", lambda f: lambda s: s.fraction <= f),
        ("lt:", lambda f: lambda s: s.fraction < f),
        ("eq:", lambda f: lambda s: s.fraction == f),
    ):
        if text.startswith(prefix):
            try:
                threshold = Fraction(text[len(prefix):])
            except (ValueError, ZeroDivisionError):
                raise EmptyInput(f"bad predicate threshold in {text!r}") from None
            return op(threshold)
    raise EmptyInput(f"unknown predicate {text!r}")
