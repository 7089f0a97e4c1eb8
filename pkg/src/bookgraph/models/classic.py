"""Non-graph baselines: popularity, neighbourhood CF, factorization, content, hybrid."""

from __future__ import annotations

import logging
import math
from collections import defaultdict

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from bookgraph.features import EmptyVocabularyError, tfidf_fit, tfidf_transform_many, tokenize
from bookgraph.graph import EntityKind, Relation
from bookgraph.models.base import (
    Recommender,
    SparseInteractionMatrix,
    TrainingDivergedError,
    interaction_arrays,
    popularity_counts,
)

log = logging.getLogger(__name__)


def _require(obj, what: str, model: str):
    if obj is None:
        raise ValueError(f"{model} needs {what} to fit")
    return obj


def _row_normalize(m: sp.csr_matrix) -> sp.csr_matrix:
    m = sp.csr_matrix(m, dtype=np.float64, copy=True)
    norms = np.sqrt(np.asarray(m.multiply(m).sum(axis=1)).ravel())
    scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    return sp.diags(scale) @ m


def _csr_state(prefix: str, m: sp.csr_matrix) -> dict[str, np.ndarray]:
    m = sp.csr_matrix(m)
    return {
        f"{prefix}_data": m.data.astype(np.float64),
        f"{prefix}_indices": m.indices.astype(np.int64),
        f"{prefix}_indptr": m.indptr.astype(np.int64),
        f"{prefix}_shape": np.asarray(m.shape, dtype=np.int64),
    }


def _csr_from_state(prefix: str, a: dict[str, np.ndarray]) -> sp.csr_matrix:
    shape = tuple(int(x) for x in a[f"{prefix}_shape"])
    return sp.csr_matrix((a[f"{prefix}_data"], a[f"{prefix}_indices"], a[f"{prefix}_indptr"]), shape=shape)


class _PopularityFallback(Recommender):
    """Users without training history get popularity order (score 0)."""

    def _set_popularity(self, train):
        self.popularity = popularity_counts(train, self.n_items)

    def tiebreak(self, user):
        if len(self.train_items(user)) == 0:
            return self.popularity
        return None

    def state_arrays(self):
        return {"popularity": self.popularity}

    def load_state_arrays(self, arrays):
        self.popularity = arrays["popularity"]


# ---------------------------------------------------------------------------


class Popularity(Recommender):
    name = "popularity"

    def _fit(self, train, graph, features, valid, seed):
        if not train:
            raise ValueError("popularity needs a non-empty training set")
        self.counts = popularity_counts(train, self.n_items)

    def score_user(self, user):
        return self.counts

    def state_arrays(self):
        return {"counts": self.counts}

    def load_state_arrays(self, arrays):
        self.counts = arrays["counts"]


class CategoryPopularity(Recommender):
    """Score = sum over a book's categories of how often the user read that category."""

    name = "category_pop"

    def _fit(self, train, graph, features, valid, seed):
        graph = _require(graph, "the book graph", self.name)
        lists = graph.adjacency_lists(Relation.BOOK_CATEGORY, EntityKind.BOOK)
        rows = np.repeat(np.arange(len(lists)), [len(x) for x in lists])
        cols = np.fromiter((c for x in lists for c in x), dtype=np.int64, count=len(rows))
        self.book_cats = sp.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(self.n_items, graph.count(EntityKind.CATEGORY))
        )
        self.popularity = popularity_counts(train, self.n_items)

    def profile(self, user: int) -> np.ndarray:
        hist = self.train_items(user)
        return np.asarray(self.book_cats[hist].sum(axis=0)).ravel()

    def score_user(self, user):
        return self.book_cats @ self.profile(user)

    def tiebreak(self, user):
        return self.popularity

    def state_arrays(self):
        return {"popularity": self.popularity, **_csr_state("book_cats", self.book_cats)}

    def load_state_arrays(self, arrays):
        self.popularity = arrays["popularity"]
        self.book_cats = _csr_from_state("book_cats", arrays)


class UserCF(_PopularityFallback):
    """Cosine user-user neighbourhood over binary interaction rows."""

    name = "user_cf"
    defaults = {"k": 50}

    def _fit(self, train, graph, features, valid, seed):
        self.matrix = SparseInteractionMatrix(train, self.n_users, self.n_items).csr
        self.normed = _row_normalize(self.matrix)
        self._set_popularity(train)

    def similarities(self, user: int) -> np.ndarray:
        return np.asarray((self.normed @ self.normed[user].T).todense()).ravel()

    def neighbours(self, user: int) -> tuple[np.ndarray, np.ndarray]:
        sims = self.similarities(user)
        sims[user] = 0.0
        cand = np.flatnonzero(sims > 0)
        order = np.lexsort((cand, -sims[cand]))[: self.hparams["k"]]
        return cand[order], sims[cand[order]]

    def score_user(self, user):
        nb, w = self.neighbours(user)
        if len(nb) == 0:
            return np.zeros(self.n_items)
        return np.asarray(self.matrix[nb].T @ w).ravel()

    def state_arrays(self):
        return {**super().state_arrays(), **_csr_state("matrix", self.matrix)}

    def load_state_arrays(self, arrays):
        super().load_state_arrays(arrays)
        self.matrix = _csr_from_state("matrix", arrays)
        self.normed = _row_normalize(self.matrix)


def truncate_rows(m: sp.csr_matrix, k: int) -> sp.csr_matrix:
    """Keep the ``k`` largest positive entries per row (ties by column)."""
    m = sp.csr_matrix(m)
    indptr, indices, data = [0], [], []
    for r in range(m.shape[0]):
        lo, hi = m.indptr[r], m.indptr[r + 1]
        cols, vals = m.indices[lo:hi], m.data[lo:hi]
        pos = vals > 0
        cols, vals = cols[pos], vals[pos]
        order = np.lexsort((cols, -vals))[:k]
        keep = np.sort(order)
        indices.extend(cols[keep].tolist())
        data.extend(vals[keep].tolist())
        indptr.append(len(indices))
    return sp.csr_matrix((np.asarray(data, dtype=np.float64), np.asarray(indices, dtype=np.int64), np.asarray(indptr)), shape=m.shape)


class ItemCF(_PopularityFallback):
    """Cosine item-item similarities truncated to each item's top-k neighbours."""

    name = "item_cf"
    defaults = {"k": 50}

    def _fit(self, train, graph, features, valid, seed):
        m = SparseInteractionMatrix(train, self.n_users, self.n_items).csr
        cols = _row_normalize(m.T.tocsr())
        sims = (cols @ cols.T).tocsr()
        sims.setdiag(0.0)
        sims.eliminate_zeros()
        self.similarity = truncate_rows(sims, self.hparams["k"])
        self._set_popularity(train)

    def score_user(self, user):
        hist = np.zeros(self.n_items)
        hist[self.train_items(user)] = 1.0
        return self.similarity @ hist

    def state_arrays(self):
        return {**super().state_arrays(), **_csr_state("similarity", self.similarity)}

    def load_state_arrays(self, arrays):
        super().load_state_arrays(arrays)
        self.similarity = _csr_from_state("similarity", arrays)


# ---------------------------------------------------------------------------
# implicit ALS


def als_objective(
    matrix: sp.csr_matrix, X: np.ndarray, Y: np.ndarray, alpha: float, reg: float
) -> float:
    """``sum_ui c_ui (p_ui - x_u.y_i)^2 + reg (|X|^2 + |Y|^2)`` over all user-item cells."""
    # unobserved cells contribute (x.y)^2 with c = 1; correct the observed ones
    total = float(np.sum((X.T @ X) * (Y.T @ Y)))
    coo = matrix.tocoo()
    pred = np.einsum("ij,ij->i", X[coo.row], Y[coo.col])
    c = 1.0 + alpha
    total += float(np.sum(c * (1.0 - pred) ** 2 - pred**2))
    return total + reg * (float(np.sum(X * X)) + float(np.sum(Y * Y)))


def _als_half_sweep(matrix: sp.csr_matrix, fixed: np.ndarray, alpha: float, reg: float) -> np.ndarray:
    d = fixed.shape[1]
    gram = fixed.T @ fixed
    base = gram + reg * np.eye(d)
    out = np.zeros((matrix.shape[0], d))
    for r in range(matrix.shape[0]):
        idx = matrix.indices[matrix.indptr[r] : matrix.indptr[r + 1]]
        if len(idx) == 0:
            continue
        Yi = fixed[idx]
        A = base + alpha * (Yi.T @ Yi)
        b = (1.0 + alpha) * Yi.sum(axis=0)
        out[r] = scipy.linalg.solve(A, b, assume_a="pos")
    return out


class ImplicitALS(Recommender):
    """Confidence-weighted implicit ALS with exact least-squares half sweeps."""

    name = "als"
    defaults = {"d": 64, "epochs": 20, "reg": 0.01, "alpha": 40.0, "init_std": 0.1}

    def _fit(self, train, graph, features, valid, seed):
        h = self.hparams
        if h["d"] < 1:
            raise ValueError("d must be >= 1")
        m = SparseInteractionMatrix(train, self.n_users, self.n_items).csr
        mt = m.T.tocsr()
        rng = np.random.default_rng(seed)
        self.user_factors = rng.normal(0.0, h["init_std"], (self.n_users, h["d"]))
        self.item_factors = rng.normal(0.0, h["init_std"], (self.n_items, h["d"]))
        self.objective_trace = [als_objective(m, self.user_factors, self.item_factors, h["alpha"], h["reg"])]
        for epoch in range(h["epochs"]):
            self.user_factors = _als_half_sweep(m, self.item_factors, h["alpha"], h["reg"])
            self.objective_trace.append(als_objective(m, self.user_factors, self.item_factors, h["alpha"], h["reg"]))
            self.item_factors = _als_half_sweep(mt, self.user_factors, h["alpha"], h["reg"])
            obj = als_objective(m, self.user_factors, self.item_factors, h["alpha"], h["reg"])
            self.objective_trace.append(obj)
            if not (np.all(np.isfinite(self.user_factors)) and np.all(np.isfinite(self.item_factors))):
                raise TrainingDivergedError(
                    f"ALS produced non-finite factors at epoch {epoch} (objective={obj!r}, "
                    f"reg={h['reg']}, alpha={h['alpha']})"
                )
            self.fit_log.append({"epoch": epoch, "objective": obj})

    def score_user(self, user):
        return self.item_factors @ self.user_factors[user]

    def state_arrays(self):
        return {"user_factors": self.user_factors, "item_factors": self.item_factors}

    def load_state_arrays(self, arrays):
        self.user_factors = arrays["user_factors"]
        self.item_factors = arrays["item_factors"]


# ---------------------------------------------------------------------------
# explicit biased MF


def mf_predict(mu, bu, bi, P, Q, users, items):
    return mu + bu[users] + bi[items] + np.einsum("ij,ij->i", P[users], Q[items])


def mf_loss(mu, bu, bi, P, Q, users, items, ratings, reg) -> float:
    """``0.5 * sum_obs [(r - r_hat)^2 + reg (b_u^2 + b_i^2 + |p_u|^2 + |q_i|^2)]``."""
    err = ratings - mf_predict(mu, bu, bi, P, Q, users, items)
    penalty = bu[users] ** 2 + bi[items] ** 2 + np.sum(P[users] ** 2, 1) + np.sum(Q[items] ** 2, 1)
    return 0.5 * float(np.sum(err**2 + reg * penalty))


def mf_loss_grad(mu, bu, bi, P, Q, users, items, ratings, reg):
    """Analytic gradient of :func:`mf_loss` with respect to ``(bu, bi, P, Q)``."""
    err = ratings - mf_predict(mu, bu, bi, P, Q, users, items)
    gbu, gbi = np.zeros_like(bu), np.zeros_like(bi)
    gP, gQ = np.zeros_like(P), np.zeros_like(Q)
    np.add.at(gbu, users, -err + reg * bu[users])
    np.add.at(gbi, items, -err + reg * bi[items])
    np.add.at(gP, users, -err[:, None] * Q[items] + reg * P[users])
    np.add.at(gQ, items, -err[:, None] * P[users] + reg * Q[items])
    return gbu, gbi, gP, gQ


class ExplicitMF(Recommender):
    """Biased rating factorization ``mu + b_u + b_i + p_u.q_i`` trained by SGD."""

    name = "explicit_mf"
    defaults = {"d": 100, "epochs": 20, "reg": 0.02, "lr": 0.005, "init_std": 0.1}

    def _fit(self, train, graph, features, valid, seed):
        h = self.hparams
        rated = [x for x in train if x.rating is not None]
        if not rated:
            raise ValueError("explicit_mf needs rated interactions; use an implicit model (als, lightgcn) instead")
        users, items, _ = interaction_arrays(rated)
        ratings = np.array([x.rating for x in rated], dtype=np.float64)
        rng = np.random.default_rng(seed)
        self.mu = float(ratings.mean())
        self.bu = np.zeros(self.n_users)
        self.bi = np.zeros(self.n_items)
        self.P = rng.normal(0.0, h["init_std"], (self.n_users, h["d"]))
        self.Q = rng.normal(0.0, h["init_std"], (self.n_items, h["d"]))
        lr, reg = h["lr"], h["reg"]
        bu, bi, P, Q = self.bu, self.bi, self.P, self.Q
        for epoch in range(h["epochs"]):
            for t in rng.permutation(len(ratings)):
                u, i = users[t], items[t]
                pu = P[u].copy()
                err = ratings[t] - (self.mu + bu[u] + bi[i] + pu @ Q[i])
                bu[u] += lr * (err - reg * bu[u])
                bi[i] += lr * (err - reg * bi[i])
                P[u] += lr * (err * Q[i] - reg * pu)
                Q[i] += lr * (err * pu - reg * Q[i])
            rmse = math.sqrt(np.mean((ratings - mf_predict(self.mu, bu, bi, P, Q, users, items)) ** 2))
            if not math.isfinite(rmse):
                raise TrainingDivergedError(f"explicit MF diverged at epoch {epoch}; lower lr (={lr})")
            self.fit_log.append({"epoch": epoch, "train_rmse": rmse})

    def predict(self, users, items) -> np.ndarray:
        return mf_predict(self.mu, self.bu, self.bi, self.P, self.Q, np.asarray(users), np.asarray(items))

    def score_user(self, user):
        return self.mu + self.bu[user] + self.bi + self.Q @ self.P[user]

    def state_arrays(self):
        return {"mu": np.array(self.mu), "bu": self.bu, "bi": self.bi, "P": self.P, "Q": self.Q}

    def load_state_arrays(self, arrays):
        self.mu = float(np.asarray(arrays["mu"]).reshape(-1)[0])
        self.bu, self.bi, self.P, self.Q = arrays["bu"], arrays["bi"], arrays["P"], arrays["Q"]


# ---------------------------------------------------------------------------
# content-based


def review_documents(train, graph, n_items: int) -> list[list[str]]:
    """Per-book token lists from the texts of that book's training reviews."""
    texts: dict[int, list[str]] = defaultdict(list)
    for x in train:
        if x.review >= 0:
            t = graph.reviews[x.review].text
            if t:
                texts[x.book].append(t)
    return [tokenize(" ".join(texts[i])) if i in texts else [] for i in range(n_items)]


class ContentBased(_PopularityFallback):
    """Max cosine between a candidate and any history book over metadata + TF-IDF."""

    name = "content"
    defaults = {"min_df": 0.2, "max_df": 0.8, "max_features": 5000, "use_text": True}

    def _fit(self, train, graph, features, valid, seed):
        features = _require(features, "book features", self.name)
        blocks = [features.metadata_matrix()]
        self.text_dim = 0
        if self.hparams["use_text"]:
            graph = _require(graph, "the book graph (for review text)", self.name)
            docs = review_documents(train, graph, self.n_items)
            fit_docs = [d for d in docs if d]
            if not fit_docs:
                raise EmptyVocabularyError("no training review text to fit TF-IDF on")
            tfidf = tfidf_fit(fit_docs, self.hparams["min_df"], self.hparams["max_df"], self.hparams["max_features"])
            blocks.append(tfidf_transform_many(tfidf, docs))
            self.text_dim = tfidf.dim
        self.item_vectors = _row_normalize(sp.hstack(blocks, format="csr"))
        self.feature_dim = self.item_vectors.shape[1]
        self._set_popularity(train)

    def score_user(self, user):
        hist = self.train_items(user)
        if len(hist) == 0:
            return np.zeros(self.n_items)
        sims = self.item_vectors @ self.item_vectors[hist].T
        return np.asarray(sims.max(axis=1).todense()).ravel()

    def state_arrays(self):
        return {**super().state_arrays(), **_csr_state("items", self.item_vectors)}

    def load_state_arrays(self, arrays):
        super().load_state_arrays(arrays)
        self.item_vectors = _csr_from_state("items", arrays)


# ---------------------------------------------------------------------------
# hybrid factorization with WARP


def warp_weight(n_items: int, q: int) -> float:
    """Rank-estimate weight ``ln(floor((n_items - 1) / q) + 1)`` after ``q`` draws."""
    return math.log((n_items - 1) // q + 1)


class HybridWARP(Recommender):
    """Items are sums of feature embeddings (identity + metadata); WARP-trained by SGD."""

    name = "hybrid_warp"
    defaults = {"d": 64, "epochs": 30, "lr": 0.05, "reg": 0.0, "max_samples": 100, "margin": 1.0}

    def _fit(self, train, graph, features, valid, seed):
        features = _require(features, "book features", self.name)
        h = self.hparams
        meta = features.metadata_matrix()
        item_feats = sp.hstack([sp.identity(self.n_items, format="csr"), meta], format="csr")
        self.feature_dim = item_feats.shape[1]
        lens = np.diff(item_feats.indptr)
        width = int(lens.max()) if len(lens) else 1
        pad = np.full((self.n_items, width), self.feature_dim, dtype=np.int64)  # padding -> zero row
        for i in range(self.n_items):
            f = item_feats.indices[item_feats.indptr[i] : item_feats.indptr[i + 1]]
            pad[i, : len(f)] = f
        self._feat_index = pad

        rng = np.random.default_rng(seed)
        d = h["d"]
        self.user_emb = (rng.random((self.n_users, d)) - 0.5) / d
        V = (rng.random((self.feature_dim + 1, d)) - 0.5) / d
        V[-1] = 0.0
        self.feature_emb = V

        pairs = SparseInteractionMatrix(train, self.n_users, self.n_items).csr.tocoo()
        pos_users, pos_items = pairs.row.astype(np.int64), pairs.col.astype(np.int64)
        Q, lr, reg, margin = h["max_samples"], h["lr"], h["reg"], h["margin"]
        U = self.user_emb
        for epoch in range(h["epochs"]):
            updates = 0
            for t in rng.permutation(len(pos_users)):
                u, i = pos_users[t], pos_items[t]
                cand = rng.integers(0, self.n_items, size=Q)
                cand = cand[~np.isin(cand, self.train_items(u))]
                if len(cand) == 0:
                    continue
                fi = pad[i]
                ri = V[fi].sum(axis=0)
                rc = V[pad[cand]].sum(axis=1)
                s_pos = U[u] @ ri
                viol = np.flatnonzero(margin - s_pos + rc @ U[u] > 0)
                if len(viol) == 0:
                    continue  # no violation within the cap: zero gradient
                q = int(viol[0]) + 1
                j = cand[viol[0]]
                L = warp_weight(self.n_items, q)
                uu = U[u].copy()
                U[u] -= lr * (L * (rc[viol[0]] - ri) + reg * uu)
                fj = pad[j]
                V[fi[fi < self.feature_dim]] += lr * L * uu
                V[fj[fj < self.feature_dim]] -= lr * L * uu
                if reg:
                    V[fi[fi < self.feature_dim]] -= lr * reg * V[fi[fi < self.feature_dim]]
                updates += 1
            if not np.all(np.isfinite(V)) or not np.all(np.isfinite(U)):
                raise TrainingDivergedError(f"WARP diverged at epoch {epoch}")
            self.fit_log.append({"epoch": epoch, "updates": updates})
        self.item_repr = self._item_representations()

    def _item_representations(self) -> np.ndarray:
        return self.feature_emb[self._feat_index].sum(axis=1)

    def score_user(self, user):
        return self.item_repr @ self.user_emb[user]

    def state_arrays(self):
        return {"user_emb": self.user_emb, "feature_emb": self.feature_emb, "item_repr": self.item_repr}

    def load_state_arrays(self, arrays):
        self.user_emb = arrays["user_emb"]
        self.feature_emb = arrays["feature_emb"]
        self.item_repr = arrays["item_repr"]
