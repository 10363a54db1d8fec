"""Word/character error rates and mean-opinion-score confidence intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

Z_95 = 1.96


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class EditCounts:
    substitutions: int
    insertions: int
    deletions: int
    n_ref: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.errors / self.n_ref


def edit_counts(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Levenshtein alignment with unit costs.

    Among minimum-cost alignments the backtrace prefers a substitution (or
    match), then a deletion, then an insertion.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(diag, d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = ins = dele = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(s), ins, dele, n)


@dataclass(frozen=True)
class MetricReport:
    wer: float
    cer: float
    substitutions: int
    insertions: int
    deletions: int
    n_ref_units: int
    char_substitutions: int
    char_insertions: int
    char_deletions: int
    n_ref_chars: int


def wer_cer(reference: str, hypothesis: str) -> MetricReport:
    """Word error rate over whitespace tokens and character error rate over the
    raw character sequence (spaces included)."""
    ref_words = reference.split()
    if not ref_words:
        raise UndefinedMetricError("error rates are undefined for an empty reference")
    words = edit_counts(ref_words, hypothesis.split())
    chars = edit_counts(list(reference), list(hypothesis))
    return MetricReport(
        wer=words.rate, cer=chars.rate,
        substitutions=words.substitutions, insertions=words.insertions, deletions=words.deletions,
        n_ref_units=words.n_ref,
        char_substitutions=chars.substitutions, char_insertions=chars.insertions,
        char_deletions=chars.deletions, n_ref_chars=chars.n_ref,
    )


def corpus_wer_cer(pairs: Sequence[Tuple[str, str]]) -> Tuple[float, float]:
    """Pooled rates: total errors over total reference units."""
    if not pairs:
        raise UndefinedMetricError("no utterances to score")
    reports = [wer_cer(r, h) for r, h in pairs]
    w_err = sum(r.substitutions + r.insertions + r.deletions for r in reports)
    c_err = sum(r.char_substitutions + r.char_insertions + r.char_deletions for r in reports)
    return w_err / sum(r.n_ref_units for r in reports), c_err / sum(r.n_ref_chars for r in reports)


def mos_ci(ratings: Sequence[float]) -> Tuple[float, float]:
    """Mean and 95% half-width ``1.96 * s / sqrt(n)`` (sample std; 0 for one rating)."""
    x = np.asarray(ratings, dtype=np.float64)
    if x.size == 0:
        raise UndefinedMetricError("no ratings")
    if np.any((x < 1) | (x > 5)) or not np.all(np.isfinite(x)):
        raise ValueError("ratings must lie in [1, 5]")
    if x.size == 1:
        return float(x[0]), 0.0
    return float(x.mean()), float(Z_95 * x.std(ddof=1) / math.sqrt(x.size))
