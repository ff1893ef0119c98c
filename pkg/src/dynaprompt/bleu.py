"""BLEU: clipped n-gram precision, geometric mean, brevity penalty.

Single-reference variant over token id sequences.  Zero precisions are
smoothed with a small epsilon so the geometric mean stays defined; the
cumulative score at order n is  bp * exp(mean(log p_1..p_n)).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

__all__ = ["BleuResult", "bleu"]

EPSILON = 1e-9


@dataclass
class BleuResult:
    precisions: tuple[float, ...]   # modified n-gram precision per order
    cumulative: tuple[float, ...]   # bp * geometric mean up to each order
    brevity_penalty: float

    @property
    def score(self) -> float:
        return self.cumulative[-1]


def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def bleu(candidate, reference, n_max: int = 4) -> BleuResult:
    """Score ``candidate`` against one ``reference`` token sequence.

    An empty candidate yields all-zero scores (with zero brevity penalty);
    an empty reference is a caller error.
    """
    candidate = list(candidate)
    reference = list(reference)
    if not reference:
        raise ValueError("bleu needs a non-empty reference")
    if not candidate:
        return BleuResult(precisions=(0.0,) * n_max,
                          cumulative=(0.0,) * n_max, brevity_penalty=0.0)

    c, r = len(candidate), len(reference)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)

    precisions = []
    for n in range(1, n_max + 1):
        cand = Counter(_ngrams(candidate, n))
        if not cand:
            precisions.append(0.0)
            continue
        ref = Counter(_ngrams(reference, n))
        clipped = sum(min(count, ref[g]) for g, count in cand.items())
        precisions.append(clipped / sum(cand.values()))

    cumulative = []
    for n in range(1, n_max + 1):
        logs = [math.log(max(p, EPSILON)) for p in precisions[:n]]
        cumulative.append(bp * math.exp(sum(logs) / n))
    return BleuResult(precisions=tuple(precisions),
                      cumulative=tuple(cumulative), brevity_penalty=bp)
