"""Evaluation metrics: word error rate and corpus BLEU.

WER is Levenshtein edit distance with unit costs divided by the reference
length (it can exceed 1 when insertions dominate). BLEU is the classic
corpus-level BLEU-4: the geometric mean of clipped n-gram precisions for
n = 1..4 times the brevity penalty exp(min(0, 1 - ref_len / hyp_len)),
with no smoothing, so a zero precision at any order zeroes the score.
Parity with external scorers is a documentation concern, not a contract;
the exact definition used here is the one above.
"""
from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .errors import InvalidInputError

BLEU_MAX_ORDER = 4


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        current = [i]
        for j, y in enumerate(b, start=1):
            current.append(
                min(
                    previous[j] + 1,  # deletion
                    current[j - 1] + 1,  # insertion
                    previous[j - 1] + (x != y),  # substitution
                )
            )
        previous = current
    return previous[-1]


def wer(hypothesis: Sequence, reference: Sequence) -> float:
    if len(reference) == 0:
        raise InvalidInputError("reference must be non-empty")
    return edit_distance(list(hypothesis), list(reference)) / len(reference)


def _ngrams(tokens: Sequence, order: int) -> Counter:
    return Counter(tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1))


@dataclass
class BleuScore:
    score: float  # 0..100
    precisions: list[float] = field(default_factory=list)
    brevity_penalty: float = 1.0
    hyp_length: int = 0
    ref_length: int = 0

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "precisions": self.precisions,
            "brevity_penalty": self.brevity_penalty,
            "hyp_length": self.hyp_length,
            "ref_length": self.ref_length,
        }


def bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> BleuScore:
    """Corpus-level BLEU-4 over parallel token sequences."""
    if len(hypotheses) != len(references):
        raise InvalidInputError(
            f"corpus sizes differ: {len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if not hypotheses:
        raise InvalidInputError("empty corpus")
    matches = [0] * BLEU_MAX_ORDER
    totals = [0] * BLEU_MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = list(hyp)
        ref = list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, BLEU_MAX_ORDER + 1):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            totals[n - 1] += max(len(hyp) - n + 1, 0)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    # an order with no hypothesis n-grams at all is vacuously perfect (this
    # keeps self-BLEU at 100 for corpora of very short sentences); an order
    # with n-grams but no matches zeroes the whole score (no smoothing)
    precisions = [(m / t) if t > 0 else 1.0 for m, t in zip(matches, totals)]
    if hyp_len == 0 or any(p == 0.0 for p in precisions):
        bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len)) if hyp_len > 0 else 0.0
        return BleuScore(0.0, precisions, bp, hyp_len, ref_len)
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    geo_mean = math.exp(sum(math.log(p) for p in precisions) / BLEU_MAX_ORDER)
    return BleuScore(100.0 * bp * geo_mean, precisions, bp, hyp_len, ref_len)


_13A_RULES = (
    (re.compile(r"<skipped>"), ""),
    (re.compile(r"-\n"), ""),
    (re.compile(r"\n"), " "),
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
)


def tokenize_13a(line: str) -> list[str]:
    """Language-independent tokenization in the style of the WMT `13a` scheme."""
    out = line
    for pattern, repl in _13A_RULES:
        out = pattern.sub(repl, out)
    return out.split()


@dataclass
class EvalReport:
    """Machine-readable evaluation summary; human tables derive from this."""

    wer: float | None = None
    bleu: BleuScore | None = None
    mean_compression_ratio: float | None = None
    peak_activation_elements: int | None = None
    n_utterances: int = 0
    truncated: int = 0
    utterances: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.wer is not None and self.wer < 0:
            raise InvalidInputError("WER cannot be negative")
        if self.bleu is not None and not 0.0 <= self.bleu.score <= 100.0:
            raise InvalidInputError("BLEU must lie in [0, 100]")

    def to_dict(self) -> dict:
        return {
            "wer": self.wer,
            "bleu": self.bleu.to_dict() if self.bleu else None,
            "mean_compression_ratio": self.mean_compression_ratio,
            "peak_activation_elements": self.peak_activation_elements,
            "n_utterances": self.n_utterances,
            "truncated": self.truncated,
            "utterances": self.utterances,
        }
