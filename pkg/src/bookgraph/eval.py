"""Masked full-catalog ranking evaluation, seed aggregation and the ablation runner."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from bookgraph.ingest import InteractionSplit
from bookgraph.metrics import metrics_at_k
from bookgraph.models import make_model
from bookgraph.models.base import Recommender

log = logging.getLogger(__name__)

DEFAULT_CUTOFFS = (5, 10, 50)
METRICS = ("hit", "mrr", "ndcg")
ABLATION_FLAGS = ("side", "relations", "interaction")
SETTING_LABELS = {
    None: "Full model",
    "side": "-- Side features",
    "relations": "-- Relations",
    "interaction": "-- Interaction",
}


class LeakageError(RuntimeError):
    """A model returned one of the user's masked (training) items."""


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class EvalProtocol:
    cutoffs: tuple[int, ...] = DEFAULT_CUTOFFS

    def __post_init__(self):
        cut = tuple(sorted({int(k) for k in self.cutoffs}))
        if not cut or cut[0] < 1:
            raise ValueError(f"cutoffs must be positive integers, got {self.cutoffs}")
        object.__setattr__(self, "cutoffs", cut)

    @property
    def mask_train(self) -> bool:
        # training items are always removed from the candidates
        return True

    @property
    def max_k(self) -> int:
        return self.cutoffs[-1]


@dataclass
class RankingReport:
    model: str
    cutoffs: tuple[int, ...]
    metrics: dict[int, dict[str, float]]
    n_users: int
    n_skipped: int
    seed: int | None = None
    config_digest: str = ""
    subset: str = "all"

    def value(self, metric: str, k: int) -> float:
        return self.metrics[k][metric]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "subset": self.subset,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "n_users": self.n_users,
            "n_skipped": self.n_skipped,
            "cutoffs": list(self.cutoffs),
            "metrics": {f"{m}@{k}": self.metrics[k][m] for k in self.cutoffs for m in METRICS},
        }

    @classmethod
    def from_dict(cls, d: dict) -> RankingReport:
        cutoffs = tuple(d["cutoffs"])
        metrics = {k: {m: d["metrics"][f"{m}@{k}"] for m in METRICS} for k in cutoffs}
        return cls(d["model"], cutoffs, metrics, d["n_users"], d["n_skipped"], d.get("seed"),
                   d.get("config_digest", ""), d.get("subset", "all"))


def _items_by_user(interactions) -> dict[int, set[int]]:
    out: dict[int, set[int]] = defaultdict(set)
    for x in interactions:
        out[x.user].add(x.book)
    return out


def evaluate_model(
    model: Recommender,
    split: InteractionSplit,
    protocol: EvalProtocol = EvalProtocol(),
    users: Iterable[int] | None = None,
    part: str = "test",
    subset: str = "all",
    config: dict | None = None,
) -> RankingReport:
    """Average Hit/MRR/NDCG at every cutoff over users with held-out items.

    Each user ranks the full catalog minus their training items (those the
    model saw and those in ``split.train``). Relevance is the user's held-out
    books that are not training books. Users with no such book, or with no
    candidate left, are skipped and counted.
    """
    held = _items_by_user(getattr(split, part))
    train = _items_by_user(split.train)
    pool = sorted(held) if users is None else sorted(set(users) & set(held))
    sums = {k: np.zeros(3) for k in protocol.cutoffs}
    n_eval = n_skip = 0
    for u in pool:
        if not 0 <= u < model.n_users:
            n_skip += 1
            continue
        mask = model.train_mask(u)
        mask[list(train.get(u, ()))] = True
        relevant = held[u] - train.get(u, set())
        if not relevant or mask.all():
            n_skip += 1
            continue
        ranked = [b for b, _ in model.rank(u, mask=mask, n=protocol.max_k)]
        leaked = [b for b in ranked if mask[b]]
        if leaked:
            raise LeakageError(f"{model.name} returned masked books {leaked[:5]} for user {u}")
        for k in protocol.cutoffs:
            sums[k] += metrics_at_k(ranked, relevant, k)
        n_eval += 1
    metrics = {
        k: {m: (float(sums[k][j] / n_eval) if n_eval else 0.0) for j, m in enumerate(METRICS)}
        for k in protocol.cutoffs
    }
    return RankingReport(
        model=model.name,
        cutoffs=protocol.cutoffs,
        metrics=metrics,
        n_users=n_eval,
        n_skipped=n_skip,
        seed=model.seed,
        config_digest=config_digest(config if config is not None else model.config()),
        subset=subset,
    )


class RandomRanker(Recommender):
    """Uniform random scores, redrawn per user from ``(seed, user)``."""

    name = "random"

    def _fit(self, train, graph, features, valid, seed):
        pass

    def score_user(self, user):
        return np.random.default_rng([self.seed or 0, user]).random(self.n_items)


def cold_start_subset(split: InteractionSplit, part: str = "test") -> set[int]:
    """Held-out users with at most one training interaction."""
    counts: dict[int, int] = defaultdict(int)
    for x in split.train:
        counts[x.user] += 1
    return {x.user for x in getattr(split, part) if counts[x.user] <= 1}


def warm_subset(split: InteractionSplit, part: str = "test") -> set[int]:
    """Every held-out user; the cold users are a subset of it."""
    return {x.user for x in getattr(split, part)}


# ---------------------------------------------------------------------------
# multi-seed aggregation


@dataclass
class SeedSummary:
    model: str
    seeds: list[int]
    reports: list[RankingReport]
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "seeds": self.seeds,
            "per_seed": [r.to_dict() for r in self.reports],
            "mean": self.mean,
            "std": self.std,
        }


def aggregate_seeds(reports: Sequence[RankingReport]) -> SeedSummary:
    """Mean and sample standard deviation (ddof=1; 0 for one run) per metric."""
    if not reports:
        raise ValueError("no reports to aggregate")
    keys = list(reports[0].to_dict()["metrics"])
    vals = np.array([[r.to_dict()["metrics"][k] for k in keys] for r in reports])
    std = vals.std(axis=0, ddof=1) if len(reports) > 1 else np.zeros(len(keys))
    return SeedSummary(
        model=reports[0].model,
        seeds=[r.seed for r in reports],
        reports=list(reports),
        mean=dict(zip(keys, vals.mean(axis=0).tolist())),
        std=dict(zip(keys, std.tolist())),
    )


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    setting: str
    removed: str | None
    subset: str
    report: RankingReport


def run_ablation(
    model_name: str,
    flags: Sequence[str],
    split: InteractionSplit,
    graph,
    features,
    hparams: dict | None = None,
    seed: int = 0,
    subsets: Sequence[str] = ("warm", "cold"),
    protocol: EvalProtocol = EvalProtocol(),
) -> list[AblationRow]:
    """Full model plus one single-removal model per flag, each evaluated on every subset."""
    bad = set(flags) - set(ABLATION_FLAGS)
    if bad:
        raise ValueError(f"unknown ablation flags {sorted(bad)}")
    chooser = {"warm": warm_subset, "cold": cold_start_subset, "all": warm_subset}
    user_sets = {s: chooser[s](split) for s in subsets}
    rows = []
    ordered = [f for f in ABLATION_FLAGS if f in set(flags)]
    for removed in [None, *ordered]:
        hp = dict(hparams or {})
        if removed is not None:
            hp["ablate"] = (removed,)
        model = make_model(model_name, graph.n_users, graph.n_books, **hp)
        model.fit(split.train, graph=graph, features=features, valid=split.valid, seed=seed)
        for s in subsets:
            report = evaluate_model(model, split, protocol, users=user_sets[s], subset=s)
            rows.append(AblationRow(SETTING_LABELS[removed], removed, s, report))
        log.info("ablation %s done", SETTING_LABELS[removed])
    return rows


# ---------------------------------------------------------------------------
# text tables


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))  # noqa: E731
    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule, *(fmt(r) for r in rows)]) + "\n"


def _metric_cols(cutoffs: Sequence[int]) -> list[tuple[str, int]]:
    return [(m, k) for m in METRICS for k in cutoffs]


_NAMES = {"hit": "Hit", "mrr": "MRR", "ndcg": "NDCG"}


def _label(m: str, k: int) -> str:
    return f"{_NAMES[m]}@{k}"


def format_reports(reports: Sequence[RankingReport]) -> str:
    """One row per model, Hit / MRR / NDCG at every cutoff."""
    if not reports:
        return ""
    cols = _metric_cols(reports[0].cutoffs)
    header = ["Model", *(_label(m, k) for m, k in cols), "Users"]
    rows = [[r.model, *(f"{r.value(m, k):.4f}" for m, k in cols), str(r.n_users)] for r in reports]
    return _table(header, rows)


def format_summaries(summaries: Sequence[SeedSummary]) -> str:
    """Mean ± std per metric over seeds."""
    if not summaries:
        return ""
    cols = _metric_cols(summaries[0].reports[0].cutoffs)
    header = ["Model", *(_label(m, k) for m, k in cols)]
    rows = [
        [s.model, *(f"{s.mean[f'{m}@{k}']:.4f} ± {s.std[f'{m}@{k}']:.4f}" for m, k in cols)]
        for s in summaries
    ]
    return _table(header, rows)


def format_ablation(rows: Sequence[AblationRow], k: int = 10) -> str:
    header = ["Setting", "Subset", f"Hit@{k}", f"MRR@{k}", f"NDCG@{k}", "Users"]
    body = [
        [r.setting, r.subset, *(f"{r.report.value(m, k):.4f}" for m in METRICS), str(r.report.n_users)]
        for r in rows
    ]
    return _table(header, body)
