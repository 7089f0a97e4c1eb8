"""LightGCN: linear propagation over the normalized user-item graph, BPR-trained."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import torch

from bookgraph.models.base import Recommender, SparseInteractionMatrix, TrainingDivergedError
from bookgraph.models.bpr import bpr_loss, sample_negatives


def build_norm_adjacency(train, n_users: int, n_items: int) -> sp.csr_matrix:
    """Symmetric ``D^-1/2 A D^-1/2`` over the bipartite graph of distinct train pairs.

    Users occupy rows ``0..n_users-1`` and items follow. Zero-degree nodes
    keep empty rows.
    """
    R = SparseInteractionMatrix(train, n_users, n_items).csr
    du = np.asarray(R.sum(axis=1)).ravel()
    di = np.asarray(R.sum(axis=0)).ravel()
    coo = R.tocoo()
    # one sqrt per edge so each entry is exactly 1/sqrt(deg_u * deg_i)
    vals = 1.0 / np.sqrt(du[coo.row] * di[coo.col])
    Rn = sp.csr_matrix((vals, (coo.row, coo.col)), shape=R.shape)
    adj = sp.bmat([[None, Rn], [Rn.T, None]], format="csr", dtype=np.float64)
    adj.sort_indices()
    return adj


def to_torch_sparse(m: sp.spmatrix, dtype=torch.float32) -> torch.Tensor:
    coo = sp.coo_matrix(m)
    idx = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
    return torch.sparse_coo_tensor(idx, torch.from_numpy(coo.data).to(dtype), coo.shape, check_invariants=False).coalesce()


def propagate(adj: torch.Tensor, emb0: torch.Tensor, layers: int) -> torch.Tensor:
    """Mean of ``E, AE, ..., A^layers E``."""
    out = emb0
    cur = emb0
    for _ in range(layers):
        cur = torch.sparse.mm(adj, cur)
        out = out + cur
    return out / (layers + 1)


class LightGCN(Recommender):
    name = "lightgcn"
    defaults = {
        "d": 64,
        "layers": 2,
        "lr": 0.01,
        "epochs": 10,
        "batch": 4096,
        "reg": 1e-4,
        "init_std": 0.1,
    }

    def _fit(self, train, graph, features, valid, seed):
        h = self.hparams
        torch.manual_seed(seed)
        rng = np.random.default_rng(seed)
        adj = to_torch_sparse(build_norm_adjacency(train, self.n_users, self.n_items))
        gen = torch.Generator().manual_seed(seed)
        emb = torch.nn.Parameter(
            torch.randn(self.n_users + self.n_items, h["d"], generator=gen) * h["init_std"]
        )
        opt = torch.optim.Adam([emb], lr=h["lr"])

        pairs = SparseInteractionMatrix(train, self.n_users, self.n_items).csr.tocoo()
        pu, pi = pairs.row.astype(np.int64), pairs.col.astype(np.int64)
        nu = self.n_users
        for epoch in range(h["epochs"]):
            order = rng.permutation(len(pu))
            total, batches = 0.0, 0
            for start in range(0, len(order), h["batch"]):
                b = order[start : start + h["batch"]]
                keep, neg = sample_negatives(rng, pu[b], self._train_indptr, self._train_indices, self.n_items)
                u = torch.from_numpy(pu[b][keep])
                p = torch.from_numpy(pi[b][keep]) + nu
                n = torch.from_numpy(neg) + nu
                if len(u) == 0:
                    continue
                final = propagate(adj, emb, h["layers"])
                loss = bpr_loss(final[u], final[p], final[n], (emb[u], emb[p], emb[n]), h["reg"])
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(f"LightGCN loss became {loss.item()} at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item()
                batches += 1
            self.fit_log.append({"epoch": epoch, "loss": total / max(batches, 1)})
        with torch.no_grad():
            final = propagate(adj, emb, h["layers"]).numpy().astype(np.float64)
        self.initial = emb.detach().numpy().astype(np.float64)
        self.user_final, self.item_final = final[:nu], final[nu:]

    def score_user(self, user):
        return self.item_final @ self.user_final[user]

    def state_arrays(self):
        return {"initial": self.initial, "user_final": self.user_final, "item_final": self.item_final}

    def load_state_arrays(self, arrays):
        self.initial = arrays["initial"]
        self.user_final, self.item_final = arrays["user_final"], arrays["item_final"]
