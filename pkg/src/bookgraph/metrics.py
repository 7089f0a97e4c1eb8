"""Binary-relevance ranking metrics at a cutoff."""

from __future__ import annotations

import math
from typing import Collection, Sequence


def metrics_at_k(ranked: Sequence[int], relevant: Collection[int], k: int) -> tuple[float, float, float]:
    """Return ``(hit, mrr, ndcg)`` of ``ranked`` truncated at ``k``.

    NDCG uses binary gains and an ideal DCG over ``min(len(relevant), k)``
    positions. An empty relevant set is undefined and raises.
    """
    if k < 1:
        raise ValueError("cutoff must be >= 1")
    if not relevant:
        raise ValueError("relevant set is empty")
    relevant = set(relevant)
    hit = mrr = dcg = 0.0
    for r, item in enumerate(ranked[:k], start=1):
        if item in relevant:
            if not hit:
                hit, mrr = 1.0, 1.0 / r
            dcg += 1.0 / math.log2(r + 1)
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(len(relevant), k) + 1))
    return hit, mrr, dcg / idcg
