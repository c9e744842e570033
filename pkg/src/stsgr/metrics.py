"""Corpus BLEU-4 and retrieval rank statistics."""
from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

import numpy as np


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[Sequence[str]]]) -> float:
    """Corpus BLEU with uniform 1-4 gram weights, clipped counts, no smoothing.

    ``references[i]`` is the list of references for ``hypotheses[i]``; the
    brevity penalty uses the reference length closest to each hypothesis.
    """
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in length")
    if not references or any(len(refs) == 0 for refs in references):
        raise ValueError("every hypothesis needs at least one reference")
    matched = [0] * 4
    total = [0] * 4
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            counts = ngrams(hyp, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    if min(matched) == 0 or hyp_len == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / 4.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def mean_rank(ranks: Sequence[int]) -> float:
    if len(ranks) == 0:
        raise ValueError("no ranks")
    return float(np.mean(ranks))


def random_rank_expectation(n_candidates: int) -> float:
    """Expected rank of the ground truth under a uniformly random ordering."""
    return (n_candidates + 1) / 2.0
