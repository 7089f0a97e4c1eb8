"""BPR loss and uniform negative sampling shared by the graph models."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def bpr_loss(
    users: torch.Tensor,
    pos: torch.Tensor,
    neg: torch.Tensor,
    raw: tuple[torch.Tensor, ...] = (),
    reg: float = 0.0,
) -> torch.Tensor:
    """Mean ``-ln sigmoid(s_ui - s_uj)`` plus ``reg * sum(|raw|^2) / B``.

    ``raw`` holds the batch's non-propagated parameters for the L2 term.
    """
    diff = (users * pos).sum(-1) - (users * neg).sum(-1)
    loss = -F.logsigmoid(diff).mean()
    if reg and raw:
        loss = loss + reg * sum(r.pow(2).sum() for r in raw) / users.shape[0]
    return loss


def sample_negatives(
    rng: np.random.Generator,
    users: np.ndarray,
    train_indptr: np.ndarray,
    train_indices: np.ndarray,
    n_items: int,
    max_rounds: int = 100,
) -> tuple[np.ndarray, np.ndarray]:
    """One uniform negative per row, never one of that user's training items.

    Returns ``(keep, negatives)``: a boolean mask of rows that received a
    negative (users who interacted with the whole catalog get none) and the
    negatives for those rows.
    """
    users = np.asarray(users, dtype=np.int64)
    counts = train_indptr[users + 1] - train_indptr[users]
    keep = counts < n_items
    rows = np.flatnonzero(keep)
    # sorted codes user*n_items+item of all training pairs
    owners = np.repeat(np.arange(len(train_indptr) - 1, dtype=np.int64), np.diff(train_indptr))
    codes = owners * n_items + train_indices
    codes.sort()
    neg = np.empty(len(rows), dtype=np.int64)
    todo = np.arange(len(rows))
    for _ in range(max_rounds):
        if len(todo) == 0:
            break
        draw = rng.integers(0, n_items, size=len(todo))
        probe = users[rows[todo]] * n_items + draw
        pos = np.searchsorted(codes, probe)
        hit = (pos < len(codes)) & (codes[np.minimum(pos, len(codes) - 1)] == probe)
        neg[todo[~hit]] = draw[~hit]
        todo = todo[hit]
    for t in todo:  # dense users: pick from the explicit complement
        u = users[rows[t]]
        allowed = np.setdiff1d(np.arange(n_items), train_indices[train_indptr[u] : train_indptr[u + 1]])
        neg[t] = allowed[rng.integers(0, len(allowed))]
    return keep, neg
