"""Two-tower retrieval: an item tower over identity, side features and linked
entities, a user tower over identity and pooled recent history, trained with
weighted in-batch softmax."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from bookgraph.graph import EntityKind, Relation, recency_key
from bookgraph.models.base import Recommender, TrainingDivergedError
from bookgraph.models.validation import embedding_metric, relevant_sets

log = logging.getLogger(__name__)

ABLATIONS = ("side", "relations", "interaction")
WEIGHT_FORMULA = "1 + 0.5*verified + 0.1*max(rating-3, 0)"


@dataclass(frozen=True)
class TowerConfig:
    id_emb_dim: int = 128
    text_proj_dim: int = 256
    out_dim: int = 256
    item_mlp_layers: int = 2
    user_mlp_layers: int = 2
    item_hidden_dim: int = 256
    user_hidden_dim: int = 256
    dropout: float = 0.1
    layer_norm: bool = True
    max_history: int = 50
    batch_size: int = 256
    epochs: int = 20
    lr: float = 5e-4
    weight_decay: float = 1e-5
    patience: int = 4
    temperature: float = 0.05
    emb_init_std: float = 0.01

    def __post_init__(self):
        dims = (self.id_emb_dim, self.text_proj_dim, self.out_dim, self.item_hidden_dim,
                self.user_hidden_dim, self.max_history, self.batch_size)
        if min(dims) <= 0 or self.item_mlp_layers < 1 or self.user_mlp_layers < 1:
            raise ValueError("tower dimensions and layer counts must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


SEARCH_SPACE = {
    "id_emb_dim": (64, 96, 128, 192),
    "text_proj_dim": (128, 192, 256, 384),
    "out_dim": (128, 192, 256, 384),
    "item_mlp_layers": (2, 3, 4),
    "user_mlp_layers": (2, 3, 4),
    "item_hidden_dim": (128, 256, 384, 512),
    "user_hidden_dim": (128, 256, 384, 512),
    "dropout": (0.0, 0.1, 0.2),
    "batch_size": (128, 256, 512, 1024),
    "lr": (1e-4, 3e-4, 5e-4, 1e-3, 2e-3),
    "max_history": (10, 20, 50, 100),
}


def check_ablation(removed) -> frozenset[str]:
    removed = frozenset(removed or ())
    bad = removed - set(ABLATIONS)
    if bad:
        raise ValueError(f"unknown ablation flags {sorted(bad)}; allowed: {ABLATIONS}")
    return removed


def in_batch_loss(
    z_users: torch.Tensor,
    z_items: torch.Tensor,
    weights: torch.Tensor | None = None,
    temperature: float = 1.0,
    item_ids: torch.Tensor | None = None,
) -> torch.Tensor:
    """Weighted softmax cross-entropy where row j's positive is column j.

    Columns holding the same item as row j's positive (other than j itself)
    are removed from row j's denominator when ``item_ids`` is given.
    """
    B = z_users.shape[0]
    if B < 2:
        raise ValueError("in-batch softmax needs at least 2 rows")
    S = z_users @ z_items.T / temperature
    if item_ids is not None:
        dup = item_ids[:, None] == item_ids[None, :]
        dup.fill_diagonal_(False)
        S = S.masked_fill(dup, float("-inf"))
    nll = -torch.diagonal(F.log_softmax(S, dim=1))
    if weights is None:
        return nll.mean()
    return (weights * nll).sum() / weights.sum()


def _mlp(n_in: int, hidden: int, n_out: int, layers: int, dropout: float, layer_norm: bool) -> nn.Sequential:
    mods: list[nn.Module] = []
    width = n_in
    for _ in range(layers - 1):
        mods.append(nn.Linear(width, hidden))
        if layer_norm:
            mods.append(nn.LayerNorm(hidden))
        mods += [nn.ReLU(), nn.Dropout(dropout)]
        width = hidden
    mods.append(nn.Linear(width, n_out))
    return nn.Sequential(*mods)


def _padded(lists: list[list[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    width = max([len(x) for x in lists] + [1])
    idx = np.zeros((len(lists), width), dtype=np.int64)
    mask = np.zeros((len(lists), width), dtype=np.float32)
    for r, x in enumerate(lists):
        idx[r, : len(x)] = x
        mask[r, : len(x)] = 1.0
    return torch.from_numpy(idx), torch.from_numpy(mask)


def _mean_pool(table: nn.Embedding, idx: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    summed = (table(idx) * mask.unsqueeze(-1)).sum(1)
    return summed / mask.sum(1, keepdim=True).clamp(min=1.0)


class BookRelations:
    """Padded author / category / publisher index lists per book."""

    def __init__(self, authors, categories, publishers, n_authors, n_categories, n_publishers):
        self.authors = _padded(authors)
        self.categories = _padded(categories)
        self.publishers = _padded(publishers)
        self.sizes = (max(n_authors, 1), max(n_categories, 1), max(n_publishers, 1))

    @classmethod
    def from_graph(cls, graph) -> BookRelations:
        B = EntityKind.BOOK
        return cls(
            graph.adjacency_lists(Relation.BOOK_AUTHOR, B),
            graph.adjacency_lists(Relation.BOOK_CATEGORY, B),
            graph.adjacency_lists(Relation.BOOK_PUBLISHER, B),
            graph.count(EntityKind.AUTHOR),
            graph.count(EntityKind.CATEGORY),
            graph.count(EntityKind.PUBLISHER),
        )


class TwoTowerNet(nn.Module):
    def __init__(self, cfg: TowerConfig, n_users: int, n_items: int, relations: BookRelations,
                 numeric: np.ndarray, text: np.ndarray, removed=frozenset(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.removed = check_ablation(removed)
        gen = torch.Generator().manual_seed(seed)
        torch.manual_seed(seed)
        d = cfg.id_emb_dim

        def table(n: int) -> nn.Embedding:
            e = nn.Embedding(max(n, 1), d)
            with torch.no_grad():
                e.weight.normal_(0.0, cfg.emb_init_std, generator=gen)
            return e

        self.item_emb = table(n_items)
        self.author_emb = table(relations.sizes[0])
        self.category_emb = table(relations.sizes[1])
        self.publisher_emb = table(relations.sizes[2])
        self.user_emb = table(n_users)
        self.global_user = nn.Parameter(torch.randn(d, generator=gen) * cfg.emb_init_std)
        self.text_proj = nn.Linear(text.shape[1], cfg.text_proj_dim)

        self.register_buffer("numeric", torch.as_tensor(numeric, dtype=torch.float32))
        self.register_buffer("text", torch.as_tensor(text, dtype=torch.float32))
        for name, (idx, mask) in (("authors", relations.authors), ("categories", relations.categories),
                                  ("publishers", relations.publishers)):
            self.register_buffer(f"{name}_idx", idx)
            self.register_buffer(f"{name}_mask", mask)

        n_in = d
        if "relations" not in self.removed:
            n_in += 3 * d
        if "side" not in self.removed:
            n_in += self.numeric.shape[1] + cfg.text_proj_dim
        self.item_mlp = _mlp(n_in, cfg.item_hidden_dim, cfg.out_dim, cfg.item_mlp_layers, cfg.dropout, cfg.layer_norm)
        self.user_mlp = _mlp(d + cfg.out_dim, cfg.user_hidden_dim, cfg.out_dim, cfg.user_mlp_layers,
                             cfg.dropout, cfg.layer_norm)

    def item_inputs(self, books: torch.Tensor) -> torch.Tensor:
        """``[e_i; p_i; a_i; c_i; n_i; t_i]`` with disabled blocks left out."""
        parts = [self.item_emb(books)]
        if "relations" not in self.removed:
            parts.append(_mean_pool(self.publisher_emb, self.publishers_idx[books], self.publishers_mask[books]))
            parts.append(_mean_pool(self.author_emb, self.authors_idx[books], self.authors_mask[books]))
            parts.append(_mean_pool(self.category_emb, self.categories_idx[books], self.categories_mask[books]))
        if "side" not in self.removed:
            parts.append(self.numeric[books])
            parts.append(self.text_proj(self.text[books]))
        return torch.cat(parts, dim=-1)

    def encode_items(self, books: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.item_mlp(self.item_inputs(books)), dim=-1)

    def encode_users(self, users: torch.Tensor, hist_z: torch.Tensor, hist_mask: torch.Tensor) -> torch.Tensor:
        """``hist_z`` is B x K x out_dim of history item embeddings, ``hist_mask`` B x K."""
        if "interaction" in self.removed:
            e = self.global_user.expand(users.shape[0], -1)
            h = torch.zeros(users.shape[0], self.cfg.out_dim, dtype=e.dtype)
        else:
            e = self.user_emb(users)
            h = (hist_z * hist_mask.unsqueeze(-1)).sum(1) / hist_mask.sum(1, keepdim=True).clamp(min=1.0)
        return F.normalize(self.user_mlp(torch.cat([e, h], dim=-1)), dim=-1)


def item_tower_forward(net: TwoTowerNet, books) -> torch.Tensor:
    return net.encode_items(torch.as_tensor(books, dtype=torch.int64))


def user_tower_forward(net: TwoTowerNet, users, histories: list[list[int]]) -> torch.Tensor:
    """Encode users from their history book lists (already truncated to K)."""
    users = torch.as_tensor(users, dtype=torch.int64)
    idx, mask = _padded(histories)
    uniq, inv = torch.unique(idx.flatten(), return_inverse=True)
    z = net.encode_items(uniq)[inv].view(idx.shape[0], idx.shape[1], -1)
    return net.encode_users(users, z, mask)


def recent_histories(train, n_users: int, k: int) -> list[list[int]]:
    """Per user, up to ``k`` distinct books, most recent first by (timestamp, review)."""
    out: list[list[int]] = [[] for _ in range(n_users)]
    for x in sorted(train, key=recency_key, reverse=True):
        h = out[x.user]
        if x.book not in h:
            h.append(x.book)
    return [h[:k] for h in out]


class TwoTower(Recommender):
    name = "two_tower"
    defaults = {**{f.name: f.default for f in fields(TowerConfig)}, "ablate": ()}

    def __init__(self, n_users, n_items, **hparams):
        super().__init__(n_users, n_items, **hparams)
        self.hparams["ablate"] = tuple(sorted(check_ablation(self.hparams["ablate"])))
        self.cfg = TowerConfig(**{k: v for k, v in self.hparams.items() if k != "ablate"})

    def config(self):
        return {**super().config(), "interaction_weight": WEIGHT_FORMULA}

    def _histories_for_batch(self, users: np.ndarray, positives: np.ndarray | None) -> tuple[torch.Tensor, torch.Tensor]:
        K = self.cfg.max_history
        idx = np.zeros((len(users), K), dtype=np.int64)
        mask = np.zeros((len(users), K), dtype=np.float32)
        for r, u in enumerate(users):
            h = self._hist[u]
            if positives is not None:
                h = [b for b in h if b != positives[r]]
            h = h[:K]
            idx[r, : len(h)] = h
            mask[r, : len(h)] = 1.0
        return torch.from_numpy(idx), torch.from_numpy(mask)

    def _encode_all(self, net: TwoTowerNet) -> tuple[np.ndarray, np.ndarray]:
        net.eval()
        with torch.no_grad():
            items = torch.arange(self.n_items)
            item_z = torch.cat([net.encode_items(items[s : s + 4096]) for s in range(0, self.n_items, 4096)])
            user_z = []
            for s in range(0, self.n_users, 1024):
                users = np.arange(s, min(s + 1024, self.n_users))
                idx, mask = self._histories_for_batch(users, None)
                user_z.append(net.encode_users(torch.from_numpy(users), item_z[idx], mask))
            user_z = torch.cat(user_z) if user_z else torch.zeros(0, self.cfg.out_dim)
        return user_z.numpy().astype(np.float64), item_z.numpy().astype(np.float64)

    def build_net(self, graph, features, seed: int) -> TwoTowerNet:
        return TwoTowerNet(self.cfg, self.n_users, self.n_items, BookRelations.from_graph(graph),
                           features.numeric, features.text, self.hparams["ablate"], seed=seed)

    def _fit(self, train, graph, features, valid, seed):
        if graph is None or features is None:
            raise ValueError("two_tower needs the book graph and book features to fit")
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        net = self.build_net(graph, features, seed)
        opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        # one spare slot so dropping the positive still leaves K history items
        self._hist = recent_histories(train, self.n_users, cfg.max_history + 1)
        users = np.array([x.user for x in train], dtype=np.int64)
        books = np.array([x.book for x in train], dtype=np.int64)
        weights = np.array([x.weight for x in train], dtype=np.float32)
        relevant = relevant_sets(valid or [], self._train_indptr, self._train_indices)

        best_score, best_state, bad_epochs = -1.0, None, 0
        last_good = copy.deepcopy(net.state_dict())
        self.valid_trace: list[float] = []
        for epoch in range(cfg.epochs):
            net.train()
            order = rng.permutation(len(users))
            total, steps = 0.0, 0
            for start in range(0, len(order), cfg.batch_size):
                b = order[start : start + cfg.batch_size]
                if len(b) < 2:
                    continue
                loss = self._batch_loss(net, users[b], books[b], weights[b])
                if not torch.isfinite(loss):
                    net.load_state_dict(last_good)
                    self._finish(net)
                    raise TrainingDivergedError(
                        f"two-tower loss became {loss.item()} at epoch {epoch}; restored last good weights"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item()
                steps += 1
            last_good = copy.deepcopy(net.state_dict())
            entry = {"epoch": epoch, "loss": total / max(steps, 1)}
            if relevant:
                uz, iz = self._encode_all(net)
                score = embedding_metric(uz, iz, relevant, self._train_indptr, self._train_indices, k=10)
                self.valid_trace.append(score)
                entry["valid_ndcg@10"] = score
                if score > best_score:
                    best_score, best_state, bad_epochs = score, copy.deepcopy(net.state_dict()), 0
                else:
                    bad_epochs += 1
            self.fit_log.append(entry)
            log.debug("two_tower epoch %d: %s", epoch, entry)
            if relevant and bad_epochs >= cfg.patience:
                break
        if best_state is not None:
            net.load_state_dict(best_state)
        self._finish(net)

    def _batch_loss(self, net: TwoTowerNet, u: np.ndarray, pos: np.ndarray, w: np.ndarray) -> torch.Tensor:
        hist_idx, hist_mask = self._histories_for_batch(u, pos)
        needed = np.unique(np.concatenate([pos, hist_idx.numpy().ravel()]))
        z = net.encode_items(torch.from_numpy(needed))
        pos_z = z[torch.from_numpy(np.searchsorted(needed, pos))]
        hist_z = z[torch.from_numpy(np.searchsorted(needed, hist_idx.numpy()))]
        user_z = net.encode_users(torch.from_numpy(u), hist_z, hist_mask)
        return in_batch_loss(user_z, pos_z, torch.from_numpy(w), self.cfg.temperature, torch.from_numpy(pos))

    def _finish(self, net: TwoTowerNet) -> None:
        self.net = net
        self.user_z, self.item_z = self._encode_all(net)
        self._hist = [h[: self.cfg.max_history] for h in self._hist]

    def score_user(self, user):
        return self.item_z @ self.user_z[user]

    def state_arrays(self):
        arrays = {"user_z": self.user_z, "item_z": self.item_z}
        if getattr(self, "net", None) is not None:
            for k, v in self.net.state_dict().items():
                arrays[f"param.{k}"] = v.detach().numpy()
        return arrays

    def load_state_arrays(self, arrays):
        self.user_z, self.item_z = arrays["user_z"], arrays["item_z"]
        self.params = {k[6:]: v for k, v in arrays.items() if k.startswith("param.")}
        self.net = None


def tower_config_dict(cfg: TowerConfig) -> dict:
    return asdict(cfg)
