"""Typed in-memory book graph and the user-item interaction table derived from it.

Entities are stored in dense per-kind tables; an entity's index is its
position in its table and its external string id lives in a side map.
Edges reference entities by ``EntityId(kind, index)``.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import enum
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

from bookgraph.models.weighting import interaction_weight

log = logging.getLogger(__name__)

EPOCH = dt.date(1970, 1, 1)


class EntityKind(str, enum.Enum):
    BOOK = "book"
    AUTHOR = "author"
    CATEGORY = "category"
    PUBLISHER = "publisher"
    REVIEW = "review"
    USER = "user"


class Relation(str, enum.Enum):
    BOOK_AUTHOR = "book_author"
    BOOK_PUBLISHER = "book_publisher"
    BOOK_CATEGORY = "book_category"
    AUTHOR_CATEGORY = "author_category"
    AUTHOR_PUBLISHER = "author_publisher"
    PUBLISHER_CATEGORY = "publisher_category"
    USER_REVIEW = "user_review"
    BOOK_REVIEW = "book_review"

    @property
    def endpoints(self) -> tuple[EntityKind, EntityKind]:
        return _ENDPOINTS[self]


_ENDPOINTS = {
    Relation.BOOK_AUTHOR: (EntityKind.BOOK, EntityKind.AUTHOR),
    Relation.BOOK_PUBLISHER: (EntityKind.BOOK, EntityKind.PUBLISHER),
    Relation.BOOK_CATEGORY: (EntityKind.BOOK, EntityKind.CATEGORY),
    Relation.AUTHOR_CATEGORY: (EntityKind.AUTHOR, EntityKind.CATEGORY),
    Relation.AUTHOR_PUBLISHER: (EntityKind.AUTHOR, EntityKind.PUBLISHER),
    Relation.PUBLISHER_CATEGORY: (EntityKind.PUBLISHER, EntityKind.CATEGORY),
    Relation.USER_REVIEW: (EntityKind.USER, EntityKind.REVIEW),
    Relation.BOOK_REVIEW: (EntityKind.BOOK, EntityKind.REVIEW),
}

INTERACTION_RELATIONS = frozenset({Relation.USER_REVIEW, Relation.BOOK_REVIEW})


class EntityId(NamedTuple):
    kind: EntityKind
    index: int


class RelationEdge(NamedTuple):
    relation: Relation
    src: EntityId
    dst: EntityId


@dataclass(frozen=True)
class Book:
    id: str
    title: str
    summary: str | None = None
    isbn: str | None = None
    avg_rating: float | None = None
    rating_count: int | None = None
    review_count: int | None = None
    pages: int | None = None
    price: float | None = None


@dataclass(frozen=True)
class Author:
    id: str
    name: str
    biography: str | None = None
    follower_count: int | None = None


@dataclass(frozen=True)
class Category:
    id: str
    name: str
    description: str | None = None
    total_book_count: int | None = None


@dataclass(frozen=True)
class Publisher:
    id: str
    name: str
    description: str | None = None
    total_author_count: int | None = None
    total_book_count: int | None = None


@dataclass(frozen=True)
class Review:
    """A single review. Its user and book are given by ``user_review`` and
    ``book_review`` edges, never by fields on the record."""

    id: str
    rating: float | None = None
    text: str | None = None
    date: dt.date | None = None
    upvotes: int = 0
    downvotes: int = 0
    verified: bool = False


@dataclass(frozen=True)
class User:
    id: str


@dataclass(frozen=True, order=True)
class Interaction:
    user: int
    book: int
    weight: float
    timestamp: int | None = None  # days since 1970-01-01
    rating: float | None = None
    verified: bool = False
    review: int = -1


_RECORD_TYPES = {
    EntityKind.BOOK: Book,
    EntityKind.AUTHOR: Author,
    EntityKind.CATEGORY: Category,
    EntityKind.PUBLISHER: Publisher,
    EntityKind.REVIEW: Review,
    EntityKind.USER: User,
}


@dataclass(frozen=True)
class UnresolvedEdge:
    """An edge read from disk whose endpoint id is not in the entity tables."""

    relation: Relation
    src: str
    dst: str
    missing: str  # "src", "dst" or "both"


class GraphError(ValueError):
    pass


class KindMismatchError(GraphError):
    pass


class BookGraph:
    """Immutable container of entity tables and relation edge lists."""

    def __init__(
        self,
        books: Sequence[Book] = (),
        authors: Sequence[Author] = (),
        categories: Sequence[Category] = (),
        publishers: Sequence[Publisher] = (),
        reviews: Sequence[Review] = (),
        users: Sequence[User] = (),
        edges: Iterable[RelationEdge] = (),
        unresolved: Iterable[UnresolvedEdge] = (),
    ):
        self._tables: dict[EntityKind, tuple] = {
            EntityKind.BOOK: tuple(books),
            EntityKind.AUTHOR: tuple(authors),
            EntityKind.CATEGORY: tuple(categories),
            EntityKind.PUBLISHER: tuple(publishers),
            EntityKind.REVIEW: tuple(reviews),
            EntityKind.USER: tuple(users),
        }
        self._ids = {
            kind: {rec.id: i for i, rec in enumerate(table)}
            for kind, table in self._tables.items()
        }
        by_rel: dict[Relation, list[RelationEdge]] = {r: [] for r in Relation}
        for e in edges:
            by_rel[Relation(e.relation)].append(e)
        self._edges = {r: tuple(v) for r, v in by_rel.items()}
        self.unresolved: tuple[UnresolvedEdge, ...] = tuple(unresolved)

    # -- tables -----------------------------------------------------------
    def table(self, kind: EntityKind) -> tuple:
        return self._tables[EntityKind(kind)]

    def count(self, kind: EntityKind) -> int:
        return len(self._tables[EntityKind(kind)])

    @property
    def books(self) -> tuple[Book, ...]:
        return self._tables[EntityKind.BOOK]

    @property
    def authors(self) -> tuple[Author, ...]:
        return self._tables[EntityKind.AUTHOR]

    @property
    def categories(self) -> tuple[Category, ...]:
        return self._tables[EntityKind.CATEGORY]

    @property
    def publishers(self) -> tuple[Publisher, ...]:
        return self._tables[EntityKind.PUBLISHER]

    @property
    def reviews(self) -> tuple[Review, ...]:
        return self._tables[EntityKind.REVIEW]

    @property
    def users(self) -> tuple[User, ...]:
        return self._tables[EntityKind.USER]

    @property
    def n_books(self) -> int:
        return len(self.books)

    @property
    def n_users(self) -> int:
        return len(self.users)

    def index_of(self, kind: EntityKind, external_id: str) -> int:
        try:
            return self._ids[EntityKind(kind)][external_id]
        except KeyError:
            raise KeyError(f"unknown {EntityKind(kind).value} id {external_id!r}") from None

    def external_id(self, node: EntityId) -> str:
        return self._tables[node.kind][node.index].id

    def has_node(self, node: EntityId) -> bool:
        return 0 <= node.index < self.count(node.kind)

    # -- edges ------------------------------------------------------------
    def edges(self, relation: Relation) -> tuple[RelationEdge, ...]:
        return self._edges[Relation(relation)]

    def all_edges(self) -> Iterable[RelationEdge]:
        for rel in Relation:
            yield from self._edges[rel]

    def _edge_is_sound(self, e: RelationEdge) -> bool:
        src_kind, dst_kind = e.relation.endpoints
        return (
            e.src.kind == src_kind
            and e.dst.kind == dst_kind
            and self.has_node(e.src)
            and self.has_node(e.dst)
        )

    @cached_property
    def _adjacency(self) -> dict[tuple[Relation, EntityKind], list[list[int]]]:
        # per (relation, node kind): sorted neighbour index lists, sound edges only
        adj: dict[tuple[Relation, EntityKind], list[list[int]]] = {}
        for rel in Relation:
            src_kind, dst_kind = rel.endpoints
            fwd = [set() for _ in range(self.count(src_kind))]
            bwd = [set() for _ in range(self.count(dst_kind))]
            for e in self._edges[rel]:
                if self._edge_is_sound(e):
                    fwd[e.src.index].add(e.dst.index)
                    bwd[e.dst.index].add(e.src.index)
            adj[rel, src_kind] = [sorted(s) for s in fwd]
            adj[rel, dst_kind] = [sorted(s) for s in bwd]
        return adj

    def neighbor_indices(self, relation: Relation, kind: EntityKind, index: int) -> list[int]:
        return self._adjacency[Relation(relation), EntityKind(kind)][index]

    def adjacency_lists(self, relation: Relation, kind: EntityKind) -> list[list[int]]:
        """Neighbour index lists for every node of ``kind`` under ``relation``."""
        relation = Relation(relation)
        kind = EntityKind(kind)
        if kind not in relation.endpoints:
            raise KindMismatchError(f"{relation.value} does not touch {kind.value} nodes")
        return self._adjacency[relation, kind]

    def review_user(self, review: int) -> int | None:
        users = self._adjacency[Relation.USER_REVIEW, EntityKind.REVIEW][review]
        return users[0] if users else None

    def review_book(self, review: int) -> int | None:
        books = self._adjacency[Relation.BOOK_REVIEW, EntityKind.REVIEW][review]
        return books[0] if books else None

    def __repr__(self) -> str:
        counts = ", ".join(f"{k.value}s={len(t)}" for k, t in self._tables.items())
        n_edges = sum(len(v) for v in self._edges.values())
        return f"BookGraph({counts}, edges={n_edges})"


# ---------------------------------------------------------------------------
# operations


@dataclass(frozen=True, order=True)
class Violation:
    kind: str  # dangling | kind_mismatch | duplicate | rating_range | multi_link
    detail: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def counts(self) -> dict[str, int]:
        return dict(sorted(Counter(v.kind for v in self.violations).items()))

    def __len__(self) -> int:
        return len(self.violations)


def _fmt_edge(e: RelationEdge) -> str:
    return (
        f"{e.relation.value}: {e.src.kind.value}#{e.src.index} -> "
        f"{e.dst.kind.value}#{e.dst.index}"
    )


def validate_graph(graph: BookGraph) -> ValidationReport:
    """Collect every integrity violation in ``graph``; an empty report means valid."""
    out: list[Violation] = []
    for u in graph.unresolved:
        out.append(Violation("dangling", f"{u.relation.value}: {u.src} -> {u.dst} ({u.missing} unknown)"))

    seen: Counter = Counter()
    for e in graph.all_edges():
        src_kind, dst_kind = e.relation.endpoints
        if e.src.kind != src_kind or e.dst.kind != dst_kind:
            out.append(Violation("kind_mismatch", _fmt_edge(e)))
            continue
        if not graph.has_node(e.src) or not graph.has_node(e.dst):
            out.append(Violation("dangling", _fmt_edge(e)))
            continue
        seen[e] += 1
    for e, n in seen.items():
        for _ in range(n - 1):
            out.append(Violation("duplicate", _fmt_edge(e)))

    for i, r in enumerate(graph.reviews):
        if r.rating is not None and not 1.0 <= r.rating <= 5.0:
            out.append(Violation("rating_range", f"review#{i} rating={r.rating}"))
    for i, b in enumerate(graph.books):
        if b.avg_rating not in (None, 0, 0.0) and not 1.0 <= b.avg_rating <= 5.0:
            out.append(Violation("rating_range", f"book#{i} avg_rating={b.avg_rating}"))

    for rel in (Relation.USER_REVIEW, Relation.BOOK_REVIEW):
        for i, linked in enumerate(graph.adjacency_lists(rel, EntityKind.REVIEW)):
            if len(linked) > 1:
                out.append(Violation("multi_link", f"review#{i} has {len(linked)} {rel.value} links"))

    out.sort()
    return ValidationReport(out)


def build_interactions(graph: BookGraph) -> tuple[list[Interaction], int]:
    """Join user-review and book-review edges into interactions.

    Returns ``(interactions, skipped)`` where ``skipped`` counts reviews
    missing a user or a book link. Interactions are ordered by
    (timestamp, review index) with missing timestamps last.
    """
    out: list[Interaction] = []
    skipped = 0
    for i, r in enumerate(graph.reviews):
        u = graph.review_user(i)
        b = graph.review_book(i)
        if u is None or b is None:
            skipped += 1
            continue
        ts = (r.date - EPOCH).days if r.date is not None else None
        out.append(
            Interaction(
                user=u,
                book=b,
                weight=interaction_weight(r.rating, r.verified),
                timestamp=ts,
                rating=r.rating,
                verified=r.verified,
                review=i,
            )
        )
    out.sort(key=recency_key)
    return out, skipped


def recency_key(x: Interaction) -> tuple:
    return (x.timestamp is None, x.timestamp or 0, x.review)


def neighbors(graph: BookGraph, node: EntityId, relation: Relation) -> list[EntityId]:
    """Nodes adjacent to ``node`` under ``relation``, ascending by index.

    Edges are traversed in both stored directions.
    """
    relation = Relation(relation)
    src_kind, dst_kind = relation.endpoints
    if node.kind not in (src_kind, dst_kind):
        raise KindMismatchError(
            f"relation {relation.value} connects {src_kind.value}/{dst_kind.value}, "
            f"not {node.kind.value}"
        )
    if not graph.has_node(node):
        raise GraphError(f"node {node.kind.value}#{node.index} does not exist")
    other = dst_kind if node.kind == src_kind else src_kind
    return [EntityId(other, j) for j in graph.neighbor_indices(relation, node.kind, node.index)]


# ---------------------------------------------------------------------------
# JSON-lines storage: entities/<kind>.jsonl, edges/<relation>.jsonl


def _record_to_json(rec) -> dict:
    d = dataclasses.asdict(rec)
    if isinstance(rec, Review) and rec.date is not None:
        d["date"] = rec.date.isoformat()
    return d


def _record_from_json(kind: EntityKind, d: dict):
    cls = _RECORD_TYPES[kind]
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: v for k, v in d.items() if k in names}
    kwargs["id"] = str(kwargs["id"])
    if kind is EntityKind.REVIEW and kwargs.get("date"):
        kwargs["date"] = dt.date.fromisoformat(kwargs["date"])
    return cls(**kwargs)


def write_graph(graph: BookGraph, root: str | Path) -> None:
    root = Path(root)
    (root / "entities").mkdir(parents=True, exist_ok=True)
    (root / "edges").mkdir(parents=True, exist_ok=True)
    for kind in EntityKind:
        with open(root / "entities" / f"{kind.value}.jsonl", "w", encoding="utf-8") as f:
            for rec in graph.table(kind):
                f.write(json.dumps(_record_to_json(rec), ensure_ascii=False) + "\n")
    for rel in Relation:
        with open(root / "edges" / f"{rel.value}.jsonl", "w", encoding="utf-8") as f:
            for e in graph.edges(rel):
                row = {
                    "relation": rel.value,
                    "src": graph.external_id(e.src),
                    "dst": graph.external_id(e.dst),
                }
                f.write(json.dumps(row, ensure_ascii=False) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise GraphError(f"{path}:{lineno}: {exc}") from exc
    return rows


def load_graph(root: str | Path) -> BookGraph:
    """Load a graph written by :func:`write_graph`.

    Edges whose endpoint ids are unknown are kept aside as
    :class:`UnresolvedEdge` so :func:`validate_graph` reports them.
    """
    root = Path(root)
    if not (root / "entities").is_dir():
        raise GraphError(f"{root} has no entities/ directory")
    tables = {
        kind: [_record_from_json(kind, d) for d in _read_jsonl(root / "entities" / f"{kind.value}.jsonl")]
        for kind in EntityKind
    }
    ids = {kind: {rec.id: i for i, rec in enumerate(t)} for kind, t in tables.items()}
    edges: list[RelationEdge] = []
    unresolved: list[UnresolvedEdge] = []
    for rel in Relation:
        src_kind, dst_kind = rel.endpoints
        for d in _read_jsonl(root / "edges" / f"{rel.value}.jsonl"):
            s, t = str(d["src"]), str(d["dst"])
            si, ti = ids[src_kind].get(s), ids[dst_kind].get(t)
            if si is None or ti is None:
                missing = "both" if si is None and ti is None else ("src" if si is None else "dst")
                unresolved.append(UnresolvedEdge(rel, s, t, missing))
                continue
            edges.append(RelationEdge(rel, EntityId(src_kind, si), EntityId(dst_kind, ti)))
    return BookGraph(
        books=tables[EntityKind.BOOK],
        authors=tables[EntityKind.AUTHOR],
        categories=tables[EntityKind.CATEGORY],
        publishers=tables[EntityKind.PUBLISHER],
        reviews=tables[EntityKind.REVIEW],
        users=tables[EntityKind.USER],
        edges=edges,
        unresolved=unresolved,
    )


# ---------------------------------------------------------------------------
# interaction TSV: user book weight timestamp rating verified review

TSV_HEADER = ("user", "book", "weight", "timestamp", "rating", "verified", "review")


def write_interactions(interactions: Sequence[Interaction], path: str | Path, graph: BookGraph) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(TSV_HEADER) + "\n")
        for x in interactions:
            f.write(
                "\t".join(
                    [
                        graph.users[x.user].id,
                        graph.books[x.book].id,
                        repr(float(x.weight)),
                        "" if x.timestamp is None else str(x.timestamp),
                        "" if x.rating is None else repr(float(x.rating)),
                        "1" if x.verified else "0",
                        graph.reviews[x.review].id if 0 <= x.review < len(graph.reviews) else "",
                    ]
                )
                + "\n"
            )


def read_interactions(path: str | Path, graph: BookGraph) -> list[Interaction]:
    """Read an interaction TSV in file order.

    Rows without a review id get a negative ``review`` that grows with the
    row number, so the recency tiebreak still follows file order.
    """
    out = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if tuple(header) != TSV_HEADER:
            raise GraphError(f"{path}: unexpected header {header}")
        lines = f.readlines()
        for row_no, line in enumerate(lines):
            cols = line.rstrip("\n").split("\t")
            if len(cols) != len(TSV_HEADER):
                raise GraphError(f"{path}:{row_no + 2}: expected {len(TSV_HEADER)} columns")
            user, book, weight, ts, rating, verified, review = cols
            out.append(
                Interaction(
                    user=graph.index_of(EntityKind.USER, user),
                    book=graph.index_of(EntityKind.BOOK, book),
                    weight=float(weight),
                    timestamp=int(ts) if ts else None,
                    rating=float(rating) if rating else None,
                    verified=verified == "1",
                    review=graph.index_of(EntityKind.REVIEW, review) if review else row_no - len(lines),
                )
            )
    return out


def group_by_user(interactions: Iterable[Interaction]) -> dict[int, list[Interaction]]:
    out: dict[int, list[Interaction]] = defaultdict(list)
    for x in interactions:
        out[x.user].append(x)
    return out
