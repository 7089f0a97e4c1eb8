"""Turn captured raw record files into a clean, deduplicated, anonymized graph.

The pipeline runs: dedup -> anonymize users -> normalize fields -> link
entities -> validate -> derive interactions. Live crawling and HTML parsing
are not part of it; input records already carry extracted fields and
per-field lists of referenced entity ids.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import math
import re
import unicodedata
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence
from urllib.parse import urlsplit, urlunsplit

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
    validate_graph,
    write_graph,
    write_interactions,
)

log = logging.getLogger(__name__)

BANGLA_DIGITS = str.maketrans("০১২৩৪৫৬৭৮৯", "0123456789")
_CURRENCY = re.compile(r"(৳|\$|টাকা|tk\.?|taka|bdt)", re.IGNORECASE)
_NUMBER = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)")

USER_KEY_FIELDS = ("user_id", "user", "username", "user_url")
PII_FIELDS = frozenset(
    {"username", "user_name", "email", "avatar", "avatar_url", "profile_image", "user_url", "user_id"}
)
USER_ID_PATTERN = re.compile(r"^USER\d+$")


class IngestError(RuntimeError):
    pass


@dataclass
class RawRecord:
    source_url: str
    entity_kind: EntityKind
    payload: dict[str, Any]

    @property
    def entity_id(self) -> str | None:
        raw = self.payload.get("id")
        if raw is None or str(raw).strip() == "":
            return None
        return str(raw).strip()


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.70
    valid_frac: float = 0.15
    test_frac: float = 0.15
    seed: int = 42

    def __post_init__(self):
        fracs = (self.train_frac, self.valid_frac, self.test_frac)
        if not all(0.0 < f < 1.0 for f in fracs):
            raise ValueError(f"split fractions must lie in (0, 1): {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)!r}")


@dataclass
class InteractionSplit:
    train: list[Interaction]
    valid: list[Interaction]
    test: list[Interaction]
    train_index: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    valid_index: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    test_index: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.valid), len(self.test)


# ---------------------------------------------------------------------------
# field normalizers


def normalize_numeric(raw: Any) -> float | None:
    """Parse a scraped numeric string; ``None`` when it cannot be parsed.

    >>> normalize_numeric("1,250")
    1250.0
    >>> normalize_numeric("৳ ১২৩")
    123.0
    """
    if raw is None or isinstance(raw, bool):
        return None
    if isinstance(raw, (int, float)):
        return float(raw) if math.isfinite(raw) else None
    s = unicodedata.normalize("NFKC", str(raw)).translate(BANGLA_DIGITS)
    s = _CURRENCY.sub("", s).replace(",", "").replace(" ", "").strip()
    if not _NUMBER.fullmatch(s):
        return None
    value = float(s)
    return value if math.isfinite(value) else None


def clamp_rating(raw: float | None) -> float | None:
    if raw is None:
        return None
    return min(max(float(raw), 1.0), 5.0)


def normalize_text(raw: str | bytes) -> str:
    """NFD-normalize and collapse whitespace. Bytes must be valid UTF-8."""
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")  # strict: raises UnicodeDecodeError
    return " ".join(unicodedata.normalize("NFD", raw).split())


def normalize_url(url: str) -> str:
    parts = urlsplit(url.strip())
    return urlunsplit((parts.scheme.lower(), parts.netloc.lower(), parts.path, parts.query, ""))


def _opt_text(raw: Any) -> str | None:
    if raw is None:
        return None
    s = normalize_text(str(raw))
    return s or None


def _opt_count(raw: Any) -> int | None:
    v = normalize_numeric(raw)
    if v is None or v < 0:
        return None
    return int(round(v))


def _parse_bool(raw: Any) -> bool:
    if isinstance(raw, bool):
        return raw
    if raw is None:
        return False
    return str(raw).strip().lower() in {"1", "true", "yes", "y", "verified"}


_DATE_FORMATS = ("%Y-%m-%d", "%d %b %Y", "%d %B %Y", "%d/%m/%Y", "%Y/%m/%d")


def parse_date(raw: Any) -> dt.date | None:
    if raw is None:
        return None
    s = normalize_text(str(raw)).translate(BANGLA_DIGITS)
    if not s:
        return None
    try:
        return dt.datetime.fromisoformat(s).date()
    except ValueError:
        pass
    for fmt in _DATE_FORMATS:
        try:
            return dt.datetime.strptime(s, fmt).date()
        except ValueError:
            continue
    return None


# ---------------------------------------------------------------------------
# dedup / anonymize / link


@dataclass
class DedupResult:
    kept: list[RawRecord]
    dropped_count: int
    quarantined: list[RawRecord]
    dropped_by_kind: dict[str, int] = field(default_factory=dict)


def record_keys(rec: RawRecord) -> list[tuple]:
    keys = []
    if rec.source_url and rec.source_url.strip():
        digest = hashlib.sha1(normalize_url(rec.source_url).encode("utf-8")).hexdigest()
        keys.append(("url", digest))
    if rec.entity_id is not None:
        keys.append(("id", EntityKind(rec.entity_kind).value, rec.entity_id))
    return keys


def dedup_records(records: Iterable[RawRecord]) -> DedupResult:
    """Keep the first record per URL hash or (kind, id); later matches are dropped.

    Records with neither a URL nor an id are quarantined.
    """
    seen: set[tuple] = set()
    kept, quarantined = [], []
    dropped: Counter = Counter()
    for rec in records:
        keys = record_keys(rec)
        if not keys:
            quarantined.append(rec)
            continue
        if any(k in seen for k in keys):
            dropped[EntityKind(rec.entity_kind).value] += 1
            continue
        seen.update(keys)
        kept.append(rec)
    return DedupResult(kept, sum(dropped.values()), quarantined, dict(sorted(dropped.items())))


def _raw_user_key(payload: dict) -> str | None:
    for name in USER_KEY_FIELDS:
        v = payload.get(name)
        if v is not None and str(v).strip():
            return str(v).strip()
    return None


def anonymize_users(records: Sequence[RawRecord], width: int = 6) -> list[RawRecord]:
    """Replace raw user keys with sequential ``USER000001``-style ids.

    Ids are issued in first-appearance order. PII fields are removed and the
    anonymous id is stored under ``payload["user"]``.
    """
    issued: dict[str, str] = {}
    out = []
    for rec in records:
        key = _raw_user_key(rec.payload)
        payload = {k: v for k, v in rec.payload.items() if k not in PII_FIELDS and k != "user"}
        if key is not None:
            if key not in issued:
                issued[key] = f"USER{len(issued) + 1:0{width}d}"
            payload["user"] = issued[key]
        out.append(RawRecord(rec.source_url, rec.entity_kind, payload))
    return out


def is_user_id(s: str) -> bool:
    return bool(USER_ID_PATTERN.match(s))


# field name on a record of kind K -> relation; the record's own kind is one endpoint
REFERENCE_FIELDS: dict[EntityKind, dict[str, Relation]] = {
    EntityKind.BOOK: {
        "author_ids": Relation.BOOK_AUTHOR,
        "category_ids": Relation.BOOK_CATEGORY,
        "publisher_ids": Relation.BOOK_PUBLISHER,
    },
    EntityKind.AUTHOR: {
        "category_ids": Relation.AUTHOR_CATEGORY,
        "publisher_ids": Relation.AUTHOR_PUBLISHER,
    },
    EntityKind.PUBLISHER: {
        "author_ids": Relation.AUTHOR_PUBLISHER,
        "category_ids": Relation.PUBLISHER_CATEGORY,
    },
    EntityKind.REVIEW: {
        "book_id": Relation.BOOK_REVIEW,
        "user": Relation.USER_REVIEW,
    },
}


@dataclass
class LinkResult:
    edges: list[RelationEdge]
    unresolved: int
    unresolved_by_relation: dict[str, int] = field(default_factory=dict)


def _as_list(v: Any) -> list[str]:
    if v is None:
        return []
    if isinstance(v, (list, tuple)):
        return [str(x).strip() for x in v if x is not None and str(x).strip()]
    s = str(v).strip()
    return [s] if s else []


def link_entities(records: Iterable[RawRecord], index: dict[EntityKind, dict[str, int]]) -> LinkResult:
    """Resolve per-record reference lists into typed edges.

    ``index`` maps each kind to its external-id -> dense-index table. A
    reference whose target is not in that table is tallied as unresolved.
    """
    edges: dict[RelationEdge, None] = {}
    unresolved: Counter = Counter()
    for rec in records:
        kind = EntityKind(rec.entity_kind)
        own = index[kind].get(rec.entity_id) if rec.entity_id is not None else None
        if own is None:
            continue
        for fname, rel in REFERENCE_FIELDS.get(kind, {}).items():
            src_kind, dst_kind = rel.endpoints
            other_kind = dst_kind if kind == src_kind else src_kind
            for ref in _as_list(rec.payload.get(fname)):
                j = index[other_kind].get(ref)
                if j is None:
                    unresolved[rel.value] += 1
                    continue
                a, b = EntityId(kind, own), EntityId(other_kind, j)
                e = RelationEdge(rel, a, b) if kind == src_kind else RelationEdge(rel, b, a)
                edges.setdefault(e, None)
    return LinkResult(list(edges), sum(unresolved.values()), dict(sorted(unresolved.items())))


def split_interactions(interactions: Sequence[Interaction], spec: SplitSpec) -> InteractionSplit:
    """Seeded uniform random split; floor sizes for train and valid, remainder to test."""
    n = len(interactions)
    if n == 0:
        raise ValueError("cannot split an empty interaction list")
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_train = math.floor(n * spec.train_frac)
    n_valid = math.floor(n * spec.valid_frac)
    tr, va, te = perm[:n_train], perm[n_train : n_train + n_valid], perm[n_train + n_valid :]
    tr, va, te = np.sort(tr), np.sort(va), np.sort(te)
    return InteractionSplit(
        train=[interactions[i] for i in tr],
        valid=[interactions[i] for i in va],
        test=[interactions[i] for i in te],
        train_index=tr,
        valid_index=va,
        test_index=te,
    )


def split_from_indices(interactions: Sequence[Interaction], index: dict[str, Sequence[int]]) -> InteractionSplit:
    parts = {k: np.asarray(index[k], dtype=np.int64) for k in ("train", "valid", "test")}
    return InteractionSplit(
        train=[interactions[i] for i in parts["train"]],
        valid=[interactions[i] for i in parts["valid"]],
        test=[interactions[i] for i in parts["test"]],
        train_index=parts["train"],
        valid_index=parts["valid"],
        test_index=parts["test"],
    )


# ---------------------------------------------------------------------------
# record -> entity


class _Quarantine(Exception):
    pass


def _build_entity(rec: RawRecord):
    p = rec.payload
    eid = rec.entity_id
    kind = EntityKind(rec.entity_kind)
    if eid is None:
        raise _Quarantine("missing id")
    if kind is EntityKind.BOOK:
        title = _opt_text(p.get("title"))
        if title is None:
            raise _Quarantine("book without title")
        avg = normalize_numeric(p.get("avg_rating"))
        pages = _opt_count(p.get("pages"))
        price = normalize_numeric(p.get("price"))
        return Book(
            id=eid,
            title=title,
            summary=_opt_text(p.get("summary")),
            isbn=_opt_text(p.get("isbn")),
            avg_rating=0.0 if avg == 0 else clamp_rating(avg),
            rating_count=_opt_count(p.get("rating_count")),
            review_count=_opt_count(p.get("review_count")),
            pages=pages if pages else None,
            price=price if price is not None and price >= 0 else None,
        )
    if kind is EntityKind.AUTHOR:
        return Author(
            id=eid,
            name=_opt_text(p.get("name")) or "",
            biography=_opt_text(p.get("biography")),
            follower_count=_opt_count(p.get("follower_count")),
        )
    if kind is EntityKind.CATEGORY:
        return Category(
            id=eid,
            name=_opt_text(p.get("name")) or "",
            description=_opt_text(p.get("description")),
            total_book_count=_opt_count(p.get("total_book_count")),
        )
    if kind is EntityKind.PUBLISHER:
        return Publisher(
            id=eid,
            name=_opt_text(p.get("name")) or "",
            description=_opt_text(p.get("description")),
            total_author_count=_opt_count(p.get("total_author_count")),
            total_book_count=_opt_count(p.get("total_book_count")),
        )
    if kind is EntityKind.REVIEW:
        rating = normalize_numeric(p.get("rating"))
        return Review(
            id=eid,
            # a raw rating of 0 marks "no rating" on the source site
            rating=None if not rating else clamp_rating(rating),
            text=_opt_text(p.get("text")),
            date=parse_date(p.get("date")),
            upvotes=_opt_count(p.get("upvotes")) or 0,
            downvotes=_opt_count(p.get("downvotes")) or 0,
            verified=_parse_bool(p.get("verified")),
        )
    raise _Quarantine(f"unsupported entity kind {kind.value}")


@dataclass
class IngestResult:
    graph: BookGraph
    interactions: list[Interaction]
    skipped: int
    quarantined: list[tuple[RawRecord | dict, str]]
    report: dict


def ingest_records(records: Sequence[RawRecord], user_id_width: int = 6) -> IngestResult:
    quarantined: list[tuple[RawRecord | dict, str]] = []
    by_kind_in = Counter(EntityKind(r.entity_kind).value for r in records)

    dd = dedup_records(records)
    quarantined += [(r, "no url and no id") for r in dd.quarantined]
    anon = anonymize_users(dd.kept, width=user_id_width)

    tables: dict[EntityKind, list] = defaultdict(list)
    accepted: list[RawRecord] = []
    for rec in anon:
        try:
            ent = _build_entity(rec)
        except _Quarantine as exc:
            quarantined.append((rec, str(exc)))
            continue
        tables[EntityKind(rec.entity_kind)].append(ent)
        accepted.append(rec)

    users: dict[str, None] = {}
    for rec in accepted:
        if EntityKind(rec.entity_kind) is EntityKind.REVIEW and "user" in rec.payload:
            users.setdefault(rec.payload["user"], None)
    tables[EntityKind.USER] = [User(u) for u in users]

    index = {k: {e.id: i for i, e in enumerate(tables[k])} for k in EntityKind}
    linked = link_entities(accepted, index)
    graph = BookGraph(
        books=tables[EntityKind.BOOK],
        authors=tables[EntityKind.AUTHOR],
        categories=tables[EntityKind.CATEGORY],
        publishers=tables[EntityKind.PUBLISHER],
        reviews=tables[EntityKind.REVIEW],
        users=tables[EntityKind.USER],
        edges=linked.edges,
    )
    validation = validate_graph(graph)
    interactions, skipped = build_interactions(graph)

    kept_by_kind = Counter(EntityKind(r.entity_kind).value for r in dd.kept)
    dedup_rate = {
        k: dd.dropped_by_kind.get(k, 0) / n for k, n in sorted(by_kind_in.items()) if n
    }
    report = {
        "input_records": len(records),
        "input_by_kind": dict(sorted(by_kind_in.items())),
        "kept_by_kind": dict(sorted(kept_by_kind.items())),
        "dropped": dd.dropped_count,
        "dropped_by_kind": dd.dropped_by_kind,
        "dedup_rate": dd.dropped_count / len(records) if records else 0.0,
        "dedup_rate_by_kind": dedup_rate,
        "quarantined": len(quarantined),
        "unresolved": linked.unresolved,
        "unresolved_by_relation": linked.unresolved_by_relation,
        "entities": {k.value: graph.count(k) for k in EntityKind},
        "edges": {r.value: len(graph.edges(r)) for r in Relation},
        "interactions": len(interactions),
        "skipped_reviews": skipped,
        "violations": validation.counts(),
    }
    return IngestResult(graph, interactions, skipped, quarantined, report)


def read_raw_dir(raw_dir: str | Path) -> tuple[list[RawRecord], list[tuple[dict, str]]]:
    """Read every ``*.jsonl`` file under ``raw_dir`` in sorted path order."""
    raw_dir = Path(raw_dir)
    if not raw_dir.is_dir():
        raise IngestError(f"{raw_dir} is not a readable directory")
    records: list[RawRecord] = []
    bad: list[tuple[dict, str]] = []
    for path in sorted(raw_dir.rglob("*.jsonl")):
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                where = {"file": str(path.relative_to(raw_dir)), "line": lineno}
                try:
                    obj = json.loads(line)
                    kind = EntityKind(obj["entity_kind"])
                    payload = obj.get("payload") or {}
                    if not isinstance(payload, dict):
                        raise TypeError("payload is not an object")
                except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                    bad.append((where, f"malformed: {exc}"))
                    continue
                records.append(RawRecord(str(obj.get("source_url") or ""), kind, payload))
    return records, bad


def run_ingest(raw_dir: str | Path, out_dir: str | Path, user_id_width: int = 6) -> IngestResult:
    """Full pipeline from a raw record directory to graph files plus report."""
    records, bad = read_raw_dir(raw_dir)
    if not records:
        raise IngestError(f"no records found under {raw_dir}")
    result = ingest_records(records, user_id_width=user_id_width)
    result.quarantined[:0] = bad
    result.report["quarantined"] = len(result.quarantined)
    result.report["malformed_lines"] = len(bad)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_graph(result.graph, out)
    write_interactions(result.interactions, out / "interactions.tsv", result.graph)
    with open(out / "quarantine.jsonl", "w", encoding="utf-8") as f:
        for item, reason in result.quarantined:
            row = asdict(item) if isinstance(item, RawRecord) else dict(item)
            if "entity_kind" in row:
                row["entity_kind"] = EntityKind(row["entity_kind"]).value
            row["reason"] = reason
            f.write(json.dumps(row, ensure_ascii=False) + "\n")
    with open(out / "ingest_report.json", "w", encoding="utf-8") as f:
        json.dump(result.report, f, indent=2, ensure_ascii=False)
        f.write("\n")
    return result
