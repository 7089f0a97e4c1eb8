"""Seeded synthetic book graphs with planted author and category preferences.

Used by the test suite and for desk-scale experiments where the real
dataset is unavailable.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from bookgraph.graph import (
    Author,
    Book,
    BookGraph,
    Category,
    EntityId,
    EntityKind,
    Interaction,
    Publisher,
    Relation,
    RelationEdge,
    Review,
    User,
    build_interactions,
)
from bookgraph.models.weighting import interaction_weight

K = EntityKind

# generic filler shared by every category so it lands in most documents
_COMMON = ["good", "book", "read", "story", "recommend", "nice"]
_TOPIC_ROOTS = [
    "magic", "detective", "history", "poetry", "science", "romance", "war", "travel",
    "child", "space", "village", "music", "money", "health", "cook", "sport",
]
_NAME_POOL = ["rahman", "ahmed", "hasan", "islam", "khan", "roy", "das", "sen"]


@dataclass
class SyntheticData:
    graph: BookGraph
    interactions: list[Interaction]
    book_author: np.ndarray
    book_category: np.ndarray
    user_category: np.ndarray


def _edge(rel: Relation, a: tuple[EntityKind, int], b: tuple[EntityKind, int]) -> RelationEdge:
    return RelationEdge(rel, EntityId(*a), EntityId(*b))


def make_synthetic(
    n_users: int = 200,
    n_books: int = 400,
    n_authors: int = 40,
    n_categories: int = 8,
    n_publishers: int = 10,
    per_user: tuple[int, int] = (4, 12),
    p_author: float = 0.6,
    p_category: float = 0.3,
    authors_per_user: int = 2,
    seed: int = 0,
) -> SyntheticData:
    """Users mostly read their favourite authors, then their favourite
    category, then anything; each read is one review.

    Books inherit their author's category. Author and category names come
    from small shared pools, so book text carries only weak identity cues.
    """
    if n_categories > len(_TOPIC_ROOTS):
        raise ValueError(f"at most {len(_TOPIC_ROOTS)} categories supported")
    rng = np.random.default_rng(seed)
    start = dt.date(2020, 1, 1)

    categories = [
        Category(f"C{c:03d}", f"{_TOPIC_ROOTS[c]} books", f"about {_TOPIC_ROOTS[c]}", int(rng.integers(10, 500)))
        for c in range(n_categories)
    ]
    publishers = [
        Publisher(f"P{p:03d}", f"prokash {p}", None, int(rng.integers(5, 80)), int(rng.integers(10, 900)))
        for p in range(n_publishers)
    ]
    author_cat = rng.integers(0, n_categories, size=n_authors)
    author_pub = rng.integers(0, n_publishers, size=n_authors)
    authors = [
        Author(f"A{a:04d}", f"{_NAME_POOL[a % len(_NAME_POOL)]}",
               None, int(rng.integers(0, 5000)))
        for a in range(n_authors)
    ]
    # every author gets at least one book when possible
    book_author = np.concatenate([np.arange(min(n_authors, n_books)),
                                  rng.integers(0, n_authors, size=max(n_books - n_authors, 0))])
    rng.shuffle(book_author)
    book_cat = author_cat[book_author]
    books = []
    for i in range(n_books):
        topic = _TOPIC_ROOTS[book_cat[i]]
        books.append(
            Book(
                f"B{i:05d}",
                f"{topic} tale {i}",
                f"a {topic} {rng.choice(_COMMON)} story",
                f"978{i:010d}",
                float(np.round(rng.uniform(1, 5), 2)),
                int(rng.integers(0, 300)),
                int(rng.integers(0, 60)),
                int(rng.integers(40, 700)),
                float(np.round(rng.uniform(80, 900), 0)),
            )
        )

    edges = []
    for i in range(n_books):
        a = int(book_author[i])
        edges.append(_edge(Relation.BOOK_AUTHOR, (K.BOOK, i), (K.AUTHOR, a)))
        edges.append(_edge(Relation.BOOK_CATEGORY, (K.BOOK, i), (K.CATEGORY, int(book_cat[i]))))
        edges.append(_edge(Relation.BOOK_PUBLISHER, (K.BOOK, i), (K.PUBLISHER, int(author_pub[a]))))
    for a in range(n_authors):
        edges.append(_edge(Relation.AUTHOR_CATEGORY, (K.AUTHOR, a), (K.CATEGORY, int(author_cat[a]))))
        edges.append(_edge(Relation.AUTHOR_PUBLISHER, (K.AUTHOR, a), (K.PUBLISHER, int(author_pub[a]))))
    pub_cat = sorted({(int(author_pub[a]), int(author_cat[a])) for a in range(n_authors)})
    for p, c in pub_cat:
        edges.append(_edge(Relation.PUBLISHER_CATEGORY, (K.PUBLISHER, p), (K.CATEGORY, c)))

    by_author = [np.flatnonzero(book_author == a) for a in range(n_authors)]
    by_cat = [np.flatnonzero(book_cat == c) for c in range(n_categories)]
    users = [User(f"USER{u + 1:06d}") for u in range(n_users)]
    user_cat = rng.integers(0, n_categories, size=n_users)
    reviews = []
    day = 0
    for u in range(n_users):
        cat_authors = np.flatnonzero((author_cat == user_cat[u]) & np.array([len(b) > 0 for b in by_author]))
        pool = cat_authors if len(cat_authors) else np.flatnonzero([len(b) > 0 for b in by_author])
        favs = rng.choice(pool, size=min(authors_per_user, len(pool)), replace=False)
        fav_books = np.concatenate([by_author[a] for a in favs])
        cat_books = by_cat[user_cat[u]] if len(by_cat[user_cat[u]]) else np.arange(n_books)
        n = int(rng.integers(per_user[0], per_user[1] + 1))
        seen: set[int] = set()
        for _ in range(n):
            for _attempt in range(20):
                r = rng.random()
                src = fav_books if r < p_author else cat_books if r < p_author + p_category else np.arange(n_books)
                b = int(rng.choice(src))
                if b not in seen:
                    break
            if b in seen:
                continue
            seen.add(b)
            j = len(reviews)
            day += int(rng.integers(0, 3))
            topic = _TOPIC_ROOTS[book_cat[b]]
            words = [topic, topic + "y", *rng.choice(_COMMON, size=2), _TOPIC_ROOTS[int(rng.integers(0, n_categories))]]
            rating = float(rng.integers(1, 6)) if rng.random() < 0.9 else None
            reviews.append(
                Review(f"R{j:06d}", rating, " ".join(words), start + dt.timedelta(days=day),
                       int(rng.integers(0, 5)), int(rng.integers(0, 2)), bool(rng.random() < 0.3))
            )
            edges.append(_edge(Relation.USER_REVIEW, (K.USER, u), (K.REVIEW, j)))
            edges.append(_edge(Relation.BOOK_REVIEW, (K.BOOK, b), (K.REVIEW, j)))

    graph = BookGraph(books, authors, categories, publishers, reviews, users, edges)
    interactions, _ = build_interactions(graph)
    return SyntheticData(graph, interactions, book_author, book_cat, user_cat)


def random_interactions(n: int, n_users: int, n_items: int, seed: int = 0) -> list[Interaction]:
    """Unstructured interactions with random ratings, timestamps and flags."""
    rng = np.random.default_rng(seed)
    users = rng.integers(0, n_users, size=n)
    items = rng.integers(0, n_items, size=n)
    ratings = rng.integers(1, 6, size=n).astype(float)
    verified = rng.random(n) < 0.3
    days = np.sort(rng.integers(0, 2000, size=n))
    return [
        Interaction(int(u), int(i), interaction_weight(float(r), bool(v)), int(d), float(r), bool(v), j)
        for j, (u, i, r, v, d) in enumerate(zip(users, items, ratings, verified, days))
    ]


def to_raw_records(graph: BookGraph) -> list[dict]:
    """Render a graph as raw ``{source_url, entity_kind, payload}`` records.

    Reviews carry a raw ``user_id`` (the user's id, lowercased) so that
    ingestion has something to anonymize.
    """
    def refs(rel: Relation, kind: EntityKind, i: int) -> list[str]:
        other = rel.endpoints[1] if rel.endpoints[0] == kind else rel.endpoints[0]
        return [graph.table(other)[j].id for j in graph.neighbor_indices(rel, kind, i)]

    base = "https://books.example.com"
    out = []
    for i, b in enumerate(graph.books):
        payload = {k: v for k, v in vars(b).items() if v is not None}
        payload["author_ids"] = refs(Relation.BOOK_AUTHOR, K.BOOK, i)
        payload["category_ids"] = refs(Relation.BOOK_CATEGORY, K.BOOK, i)
        payload["publisher_ids"] = refs(Relation.BOOK_PUBLISHER, K.BOOK, i)
        out.append({"source_url": f"{base}/book/{b.id}", "entity_kind": "book", "payload": payload})
    for i, a in enumerate(graph.authors):
        payload = {k: v for k, v in vars(a).items() if v is not None}
        payload["category_ids"] = refs(Relation.AUTHOR_CATEGORY, K.AUTHOR, i)
        payload["publisher_ids"] = refs(Relation.AUTHOR_PUBLISHER, K.AUTHOR, i)
        out.append({"source_url": f"{base}/author/{a.id}", "entity_kind": "author", "payload": payload})
    for c in graph.categories:
        payload = {k: v for k, v in vars(c).items() if v is not None}
        out.append({"source_url": f"{base}/category/{c.id}", "entity_kind": "category", "payload": payload})
    for i, p in enumerate(graph.publishers):
        payload = {k: v for k, v in vars(p).items() if v is not None}
        payload["category_ids"] = refs(Relation.PUBLISHER_CATEGORY, K.PUBLISHER, i)
        out.append({"source_url": f"{base}/publisher/{p.id}", "entity_kind": "publisher", "payload": payload})
    for i, r in enumerate(graph.reviews):
        payload = {
            "id": r.id,
            "rating": r.rating,
            "text": r.text,
            "date": r.date.isoformat() if r.date else None,
            "upvotes": r.upvotes,
            "downvotes": r.downvotes,
            "verified": r.verified,
        }
        u, b = graph.review_user(i), graph.review_book(i)
        if b is not None:
            payload["book_id"] = graph.books[b].id
        if u is not None:
            payload["user_id"] = graph.users[u].id.lower()
        out.append({"source_url": f"{base}/review/{r.id}", "entity_kind": "review", "payload": payload})
    return out


def write_raw_dir(graph: BookGraph, path) -> None:
    """One ``<kind>.jsonl`` file per entity kind."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    by_kind: dict[str, list[dict]] = {}
    for rec in to_raw_records(graph):
        by_kind.setdefault(rec["entity_kind"], []).append(rec)
    for kind, recs in by_kind.items():
        with open(root / f"{kind}.jsonl", "w", encoding="utf-8") as f:
            for rec in recs:
                f.write(json.dumps(rec, ensure_ascii=False) + "\n")
