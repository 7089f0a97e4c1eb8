"""Relational heterogeneous GNN over the six-kind book graph.

Each base relation is used in both directions (sixteen directed relations).
Review nodes are the training interactions only, so no held-out review
reaches the message passing.
"""

from __future__ import annotations

import copy
import logging
import math

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn as nn
import torch.nn.functional as F

from bookgraph.features import compute_catalog_stats, numeric_vector
from bookgraph.graph import INTERACTION_RELATIONS, EntityKind, Relation
from bookgraph.models.base import Recommender, TrainingDivergedError
from bookgraph.models.bpr import bpr_loss, sample_negatives
from bookgraph.models.lightgcn import to_torch_sparse
from bookgraph.models.validation import embedding_metric, relevant_sets

log = logging.getLogger(__name__)

K = EntityKind
ABLATIONS = ("side", "relations", "interaction")
REVIEW_FEATURES = ("rating/5", "has_rating", "log1p_upvotes", "log1p_downvotes", "verified")


def _log1p(v) -> float:
    return math.log1p(max(float(v or 0), 0.0))


def entity_features(graph, train, features=None) -> dict[EntityKind, np.ndarray]:
    """Input feature matrices for every featured node kind (users have none)."""
    if features is not None:
        book = np.asarray(features.numeric, dtype=np.float64)
    else:
        stats = compute_catalog_stats(graph)
        book = np.stack([numeric_vector(b, stats) for b in graph.books]) if graph.books else np.zeros((0, 5))
    deg = {
        kind: np.array([len(x) for x in graph.adjacency_lists(rel, kind)], dtype=np.float64)
        for rel, kind in (
            (Relation.BOOK_AUTHOR, K.AUTHOR),
            (Relation.BOOK_CATEGORY, K.CATEGORY),
            (Relation.BOOK_PUBLISHER, K.PUBLISHER),
        )
    }
    author = np.array(
        [[_log1p(a.follower_count), _log1p(d)] for a, d in zip(graph.authors, deg[K.AUTHOR])]
    ).reshape(-1, 2)
    category = np.array(
        [[_log1p(c.total_book_count), _log1p(d)] for c, d in zip(graph.categories, deg[K.CATEGORY])]
    ).reshape(-1, 2)
    publisher = np.array(
        [
            [_log1p(p.total_author_count), _log1p(p.total_book_count), _log1p(d)]
            for p, d in zip(graph.publishers, deg[K.PUBLISHER])
        ]
    ).reshape(-1, 3)
    review = np.zeros((len(train), len(REVIEW_FEATURES)))
    for j, x in enumerate(train):
        up = down = 0
        r = x.review
        if 0 <= r < len(graph.reviews) and graph.review_user(r) == x.user and graph.review_book(r) == x.book:
            up, down = graph.reviews[r].upvotes, graph.reviews[r].downvotes
        review[j] = [
            (x.rating or 0.0) / 5.0,
            float(x.rating is not None),
            _log1p(up),
            _log1p(down),
            float(x.verified),
        ]
    return {K.BOOK: book, K.AUTHOR: author, K.CATEGORY: category, K.PUBLISHER: publisher, K.REVIEW: review}


def _mean_matrix(dst_of_src: list[list[int]], n_src: int, n_dst: int) -> sp.csr_matrix:
    """Row-normalized ``n_dst x n_src`` matrix: each destination averages its sources."""
    rows, cols = [], []
    for s, dsts in enumerate(dst_of_src):
        for d in dsts:
            rows.append(d)
            cols.append(s)
    m = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_dst, n_src))
    m.sum_duplicates()
    m.data[:] = 1.0
    deg = np.asarray(m.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return sp.diags(inv) @ m


def relation_operators(graph, train, n_users: int, removed=frozenset()) -> dict[str, tuple]:
    """``name -> (src kind, dst kind, mean matrix)`` for every non-empty directed relation."""
    sizes = {k: graph.count(k) for k in K}
    sizes[K.USER] = n_users
    sizes[K.REVIEW] = len(train)
    lists: dict[Relation, tuple[EntityKind, EntityKind, list[list[int]]]] = {}
    for rel in Relation:
        if rel in INTERACTION_RELATIONS:
            continue
        a, b = rel.endpoints
        lists[rel] = (a, b, graph.adjacency_lists(rel, a))
    lists[Relation.USER_REVIEW] = (K.USER, K.REVIEW, [[] for _ in range(n_users)])
    lists[Relation.BOOK_REVIEW] = (K.BOOK, K.REVIEW, [[] for _ in range(sizes[K.BOOK])])
    for j, x in enumerate(train):
        lists[Relation.USER_REVIEW][2][x.user].append(j)
        lists[Relation.BOOK_REVIEW][2][x.book].append(j)

    ops = {}
    for rel, (a, b, fwd) in lists.items():
        if "relations" in removed and rel not in INTERACTION_RELATIONS:
            continue
        if "interaction" in removed and rel is Relation.USER_REVIEW:
            continue
        bwd: list[list[int]] = [[] for _ in range(sizes[b])]
        for s, dsts in enumerate(fwd):
            for d in dsts:
                bwd[d].append(s)
        for name, src, dst, adj in ((f"{rel.value}>", a, b, fwd), (f"{rel.value}<", b, a, bwd)):
            m = _mean_matrix(adj, sizes[src], sizes[dst])
            if m.nnz == 0:
                log.warning("hgnn: relation %s has no edges; skipped", name)
                continue
            ops[name] = (src, dst, m)
    return ops


class HGNNNet(nn.Module):
    def __init__(self, inputs: dict[EntityKind, np.ndarray], ops: dict[str, tuple], n_users: int,
                 d: int, layers: int, dropout: float, shared_user: bool, init_std: float, seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        self.kinds = [k for k in K]
        self.n_nodes = {k: (n_users if k is K.USER else inputs[k].shape[0]) for k in K}
        for k, x in inputs.items():
            self.register_buffer(f"x_{k.value}", torch.as_tensor(x, dtype=torch.float32))
        self.input_proj = nn.ModuleDict({k.value: nn.Linear(x.shape[1], d) for k, x in inputs.items()})
        self.shared_user = shared_user
        self.user_emb = nn.Parameter(torch.randn(1 if shared_user else max(n_users, 1), d, generator=gen) * init_std)
        self.op_names = sorted(ops)
        self.op_kinds = {name: (ops[name][0], ops[name][1]) for name in self.op_names}
        self.ops = {name: to_torch_sparse(ops[name][2]) for name in self.op_names}
        self.layers = nn.ModuleList(
            nn.ModuleDict({name.replace(">", "_f").replace("<", "_b"): nn.Linear(d, d) for name in self.op_names})
            for _ in range(layers)
        )
        self.dropout = nn.Dropout(dropout)
        self.user_out = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d))
        self.book_out = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d))
        self.d = d

    def initial(self) -> dict[EntityKind, torch.Tensor]:
        h = {k: self.input_proj[k.value](getattr(self, f"x_{k.value}")) for k in K if k is not K.USER}
        n_u = self.n_nodes[K.USER]
        h[K.USER] = self.user_emb.expand(n_u, -1) if self.shared_user else self.user_emb[:n_u]
        return h

    def forward(self) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.initial()
        for layer in self.layers:
            out = {k: torch.zeros(self.n_nodes[k], self.d) for k in K}
            for name in self.op_names:
                src, dst = self.op_kinds[name]
                lin = layer[name.replace(">", "_f").replace("<", "_b")]
                out[dst] = out[dst] + torch.sparse.mm(self.ops[name], lin(h[src]))
            h = {k: self.dropout(F.relu(v)) for k, v in out.items()}
        return self.user_out(h[K.USER]), self.book_out(h[K.BOOK])


class HGNN(Recommender):
    name = "hgnn"
    defaults = {
        "d": 64,
        "layers": 2,
        "dropout": 0.2,
        "lr": 0.005,
        "epochs": 50,
        "batch": 512,
        "reg": 1e-4,
        "patience": 5,
        "init_std": 0.1,
        "ablate": (),
    }

    def __init__(self, n_users, n_items, **hparams):
        super().__init__(n_users, n_items, **hparams)
        removed = frozenset(self.hparams["ablate"] or ())
        if removed - set(ABLATIONS):
            raise ValueError(f"unknown ablation flags {sorted(removed - set(ABLATIONS))}")
        self.hparams["ablate"] = tuple(sorted(removed))

    def build_net(self, graph, train, features, seed: int) -> HGNNNet:
        removed = frozenset(self.hparams["ablate"])
        inputs = entity_features(graph, train, features)
        if "side" in removed:
            inputs = {k: np.zeros_like(v) for k, v in inputs.items()}
        ops = relation_operators(graph, train, self.n_users, removed)
        h = self.hparams
        return HGNNNet(inputs, ops, self.n_users, h["d"], h["layers"], h["dropout"],
                       "interaction" in removed, h["init_std"], seed)

    def _fit(self, train, graph, features, valid, seed):
        if graph is None:
            raise ValueError("hgnn needs the book graph to fit")
        if graph.n_books != self.n_items:
            raise ValueError(f"graph has {graph.n_books} books, model expects {self.n_items}")
        h = self.hparams
        rng = np.random.default_rng(seed)
        net = self.build_net(graph, train, features, seed)
        opt = torch.optim.Adam(net.parameters(), lr=h["lr"])
        pairs = np.unique(np.array([(x.user, x.book) for x in train], dtype=np.int64).reshape(-1, 2), axis=0)
        pu, pi = pairs[:, 0], pairs[:, 1]
        relevant = relevant_sets(valid or [], self._train_indptr, self._train_indices)
        best, best_state, bad = -1.0, None, 0
        self.valid_trace: list[float] = []
        for epoch in range(h["epochs"]):
            net.train()
            order = rng.permutation(len(pu))
            total, steps = 0.0, 0
            for start in range(0, len(order), h["batch"]):
                b = order[start : start + h["batch"]]
                keep, neg = sample_negatives(rng, pu[b], self._train_indptr, self._train_indices, self.n_items)
                if not keep.any():
                    continue
                u = torch.from_numpy(pu[b][keep])
                p = torch.from_numpy(pi[b][keep])
                n = torch.from_numpy(neg)
                users, books = net()
                loss = bpr_loss(users[u], books[p], books[n], (users[u], books[p], books[n]), h["reg"])
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(f"HGNN loss became {loss.item()} at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item()
                steps += 1
            entry = {"epoch": epoch, "loss": total / max(steps, 1)}
            if relevant:
                uz, iz = self._embed(net)
                score = embedding_metric(uz, iz, relevant, self._train_indptr, self._train_indices, k=10, metric="mrr")
                self.valid_trace.append(score)
                entry["valid_mrr@10"] = score
                if score > best:
                    best, best_state, bad = score, copy.deepcopy(net.state_dict()), 0
                else:
                    bad += 1
            self.fit_log.append(entry)
            if relevant and bad >= h["patience"]:
                break
        if best_state is not None:
            net.load_state_dict(best_state)
        self.net = net
        self.user_final, self.item_final = self._embed(net)

    @staticmethod
    def _embed(net: HGNNNet) -> tuple[np.ndarray, np.ndarray]:
        net.eval()
        with torch.no_grad():
            users, books = net()
        return users.numpy().astype(np.float64), books.numpy().astype(np.float64)

    def score_user(self, user):
        return self.item_final @ self.user_final[user]

    def state_arrays(self):
        return {"user_final": self.user_final, "item_final": self.item_final}

    def load_state_arrays(self, arrays):
        self.user_final, self.item_final = arrays["user_final"], arrays["item_final"]
