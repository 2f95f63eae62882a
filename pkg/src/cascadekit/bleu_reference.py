"""Plain-loop corpus BLEU used as a cross-check oracle.

This module is deliberately unclever: counting is done with dicts and
explicit loops so it can be audited line by line.  The production scorer in
:mod:`cascadekit.evaluation` must agree with it to high precision; tests
enforce that.  Keep this file frozen unless the scoring contract changes.

Scoring contract:

* corpus-level BLEU-4 with uniform 1/4 weights over one reference per
  candidate, where tokens are integer ids;
* brevity penalty ``exp(1 - r / c)`` when total candidate length ``c`` is
  shorter than total reference length ``r``, else 1;
* modified (clipped) n-gram precision aggregated over the corpus;
* add-one smoothing only for n >= 2 when the clipped match count is zero:
  ``p_n = 1 / (total_ngrams_n + 1)``, and ``p_n = 1`` when there are no
  candidate n-grams of that order at all;
* unigram precision is never smoothed: zero unigram matches give BLEU 0,
  as does an empty candidate corpus (c == 0).
"""

from __future__ import annotations

import math
from typing import Sequence


def _ngram_counts(tokens: Sequence[int], n: int) -> dict:
    counts: dict = {}
    for i in range(len(tokens) - n + 1):
        gram = tuple(tokens[i:i + n])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


def bleu_reference(candidates: Sequence[Sequence[int]],
                   references: Sequence[Sequence[int]]) -> float:
    """Corpus BLEU-4 of integer-token candidates against single references."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references must pair up one-to-one")
    c_len = sum(len(c) for c in candidates)
    r_len = sum(len(r) for r in references)
    if c_len == 0:
        return 0.0

    log_sum = 0.0
    for n in range(1, 5):
        matched = 0
        total = 0
        for cand, ref in zip(candidates, references):
            cand_counts = _ngram_counts(cand, n)
            ref_counts = _ngram_counts(ref, n)
            for gram, count in cand_counts.items():
                matched += min(count, ref_counts.get(gram, 0))
            total += max(0, len(cand) - n + 1)
        if n == 1:
            if matched == 0:
                return 0.0
            p_n = matched / total
        elif total == 0:
            p_n = 1.0
        elif matched == 0:
            p_n = 1.0 / (total + 1)
        else:
            p_n = matched / total
        log_sum += 0.25 * math.log(p_n)

    bp = math.exp(1.0 - r_len / c_len) if c_len < r_len else 1.0
    return bp * math.exp(log_sum)
