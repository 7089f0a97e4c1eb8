"""Recommender families.

Model classes are imported lazily through :func:`model_class` so that the
graph module can use :mod:`bookgraph.models.weighting` without pulling in
torch.
"""

from __future__ import annotations

import importlib

_REGISTRY = {
    "popularity": ("bookgraph.models.classic", "Popularity"),
    "category_pop": ("bookgraph.models.classic", "CategoryPopularity"),
    "user_cf": ("bookgraph.models.classic", "UserCF"),
    "item_cf": ("bookgraph.models.classic", "ItemCF"),
    "als": ("bookgraph.models.classic", "ImplicitALS"),
    "explicit_mf": ("bookgraph.models.classic", "ExplicitMF"),
    "content": ("bookgraph.models.classic", "ContentBased"),
    "hybrid_warp": ("bookgraph.models.classic", "HybridWARP"),
    "lightgcn": ("bookgraph.models.lightgcn", "LightGCN"),
    "hgnn": ("bookgraph.models.hgnn", "HGNN"),
    "two_tower": ("bookgraph.models.two_tower", "TwoTower"),
}

MODEL_NAMES = tuple(_REGISTRY)


def model_class(name: str):
    try:
        module, attr = _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}") from None
    return getattr(importlib.import_module(module), attr)


def make_model(name: str, n_users: int, n_items: int, **hparams):
    return model_class(name)(n_users, n_items, **hparams)
