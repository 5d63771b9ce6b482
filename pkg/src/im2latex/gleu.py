"""Google BLEU (GLEU): min(n-gram precision, n-gram recall) over n = 1..4."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

MAX_N = 4


@dataclass(frozen=True)
class GleuStats:
    match_count: int = 0
    hyp_ngrams: int = 0
    ref_ngrams: int = 0

    def __add__(self, other: "GleuStats") -> "GleuStats":
        return GleuStats(self.match_count + other.match_count, self.hyp_ngrams + other.hyp_ngrams,
                         self.ref_ngrams + other.ref_ngrams)

    @property
    def score(self) -> float:
        if self.hyp_ngrams == 0 and self.ref_ngrams == 0:
            return 1.0
        if self.hyp_ngrams == 0 or self.ref_ngrams == 0:
            return 0.0
        return min(self.match_count / self.hyp_ngrams, self.match_count / self.ref_ngrams)


def metric_tokens(text: str) -> list[str]:
    """Whitespace split of a detokenized LaTeX string."""
    return text.split()


def _ngrams(tokens: Sequence, max_n: int) -> Counter:
    counts: Counter = Counter()
    for n in range(1, max_n + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i:i + n])] += 1
    return counts


def sentence_stats(hyp: Sequence, ref: Sequence, max_n: int = MAX_N) -> GleuStats:
    if max_n < 1:
        raise ValueError(f"max_n must be >= 1, got {max_n}")
    h, r = _ngrams(hyp, max_n), _ngrams(ref, max_n)
    matches = sum(min(c, r[g]) for g, c in h.items())
    return GleuStats(matches, sum(h.values()), sum(r.values()))


def gleu_sentence(hyp: Sequence, ref: Sequence, max_n: int = MAX_N) -> float:
    return sentence_stats(hyp, ref, max_n).score


def corpus_stats(pairs: Iterable[tuple[Sequence, Sequence]], max_n: int = MAX_N) -> GleuStats:
    total = GleuStats()
    count = 0
    for hyp, ref in pairs:
        total = total + sentence_stats(hyp, ref, max_n)
        count += 1
    if count == 0:
        raise ValueError("corpus GLEU needs at least one (hypothesis, reference) pair")
    return total


def gleu_corpus(pairs: Iterable[tuple[Sequence, Sequence]], max_n: int = MAX_N) -> float:
    """Micro-averaged GLEU: statistics are summed over the corpus before scoring."""
    return corpus_stats(pairs, max_n).score
