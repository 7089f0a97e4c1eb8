"""Held-out ranking metric used for early stopping inside training loops."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from bookgraph.metrics import metrics_at_k
from bookgraph.models.base import top_n


def relevant_sets(interactions, train_indptr, train_indices) -> dict[int, set[int]]:
    """Per-user held-out items that are not already training items."""
    rel: dict[int, set[int]] = defaultdict(set)
    for x in interactions:
        seen = train_indices[train_indptr[x.user] : train_indptr[x.user + 1]]
        if x.book not in seen:
            rel[x.user].add(x.book)
    return {u: s for u, s in rel.items() if s}


def embedding_metric(
    user_vecs: np.ndarray,
    item_vecs: np.ndarray,
    relevant: dict[int, set[int]],
    train_indptr: np.ndarray,
    train_indices: np.ndarray,
    k: int = 10,
    metric: str = "ndcg",
    chunk: int = 512,
) -> float:
    """Mean metric@k of dot-product rankings with training items masked."""
    if not relevant:
        return 0.0
    pick = {"hit": 0, "mrr": 1, "ndcg": 2}[metric]
    users = np.array(sorted(relevant), dtype=np.int64)
    n_items = item_vecs.shape[0]
    total = 0.0
    for start in range(0, len(users), chunk):
        block = users[start : start + chunk]
        scores = user_vecs[block] @ item_vecs.T
        for row, u in enumerate(block):
            mask = np.zeros(n_items, dtype=bool)
            mask[train_indices[train_indptr[u] : train_indptr[u + 1]]] = True
            ranked = top_n(scores[row], mask, k)
            total += metrics_at_k(ranked.tolist(), relevant[u], k)[pick]
    return total / len(users)
