"""Independent reference implementations used to check the package.

None of these import package internals; each is the slowest obvious way
to compute the quantity.
"""

from __future__ import annotations

import math

import numpy as np


def brute_metrics(ranked, relevant, k):
    """Hit / MRR / NDCG@k by direct enumeration of rank positions."""
    top = list(ranked)[:k]
    hit = 1.0 if any(b in relevant for b in top) else 0.0
    mrr = 0.0
    for pos, b in enumerate(top, start=1):
        if b in relevant:
            mrr = 1.0 / pos
            break
    dcg = 0.0
    for pos, b in enumerate(top, start=1):
        if b in relevant:
            dcg += 1.0 / math.log2(pos + 1)
    idcg = 0.0
    for pos in range(1, min(len(relevant), k) + 1):
        idcg += 1.0 / math.log2(pos + 1)
    return hit, mrr, dcg / idcg


def dense_norm_adjacency(pairs, n_users, n_items):
    """``D^-1/2 A D^-1/2`` built entry by entry on a dense array."""
    n = n_users + n_items
    A = np.zeros((n, n))
    for u, i in set(pairs):
        A[u, n_users + i] = 1.0
        A[n_users + i, u] = 1.0
    deg = A.sum(axis=1)
    out = np.zeros_like(A)
    for r in range(n):
        for c in range(n):
            if A[r, c]:
                out[r, c] = 1.0 / math.sqrt(deg[r] * deg[c])
    return out


def dense_lightgcn(adj, E0, layers):
    acc = E0.copy()
    cur = E0.copy()
    for _ in range(layers):
        cur = adj @ cur
        acc = acc + cur
    return acc / (layers + 1)


def brute_cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def in_batch_loss_np(U, V, w, tau, items=None):
    """Weighted softmax cross-entropy with row j's positive at column j."""
    B = U.shape[0]
    total = 0.0
    for j in range(B):
        num = math.exp(U[j] @ V[j] / tau)
        den = 0.0
        for k in range(B):
            if items is not None and k != j and items[k] == items[j]:
                continue
            den += math.exp(U[j] @ V[k] / tau)
        total += -w[j] * math.log(num / den)
    return total / float(np.sum(w))


def bpr_loss_np(U, P, N, reg=0.0):
    diff = np.sum(U * P, 1) - np.sum(U * N, 1)
    loss = float(np.mean(np.log1p(np.exp(-diff))))
    return loss + reg * float(np.sum(U**2) + np.sum(P**2) + np.sum(N**2)) / U.shape[0]


def central_difference(f, x, eps=1e-6):
    """Numerical gradient of scalar ``f`` at array ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        hi = f(x)
        x[idx] = old - eps
        lo = f(x)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def jaccard(a, b):
    a, b = set(a), set(b)
    return len(a & b) / len(a | b) if a | b else 0.0


def brute_tfidf(docs, terms):
    """Dense tf-idf rows for a fixed ``terms`` list, unigrams and bigrams."""
    n = len(docs)
    grams = []
    for d in docs:
        g = list(d) + [d[i] + " " + d[i + 1] for i in range(len(d) - 1)]
        grams.append(g)
    out = np.zeros((n, len(terms)))
    for j, t in enumerate(terms):
        df = sum(1 for g in grams if t in g)
        idf = math.log((1 + n) / (1 + df)) + 1
        for i, g in enumerate(grams):
            out[i, j] = g.count(t) * idf
    for i in range(n):
        nrm = math.sqrt(sum(v * v for v in out[i]))
        if nrm:
            out[i] /= nrm
    return out
