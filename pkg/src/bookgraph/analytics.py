"""Dataset profiling: completeness, sparsity histograms, rating and language
distributions, page-length engagement and publisher affinity."""

from __future__ import annotations

import enum
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations

from bookgraph.graph import BookGraph, EntityKind, Relation

K = EntityKind

COMPLETENESS_FIELDS = ("Title", "Book ID", "Category", "Publisher", "Rating", "Review Count", "Pages", "ISBN", "Summary")
ENGAGEMENT_BINS = ("0", "1", "2", "3", "4", "5+")
ACTIVITY_BINS = ("1", "2-4", "5-9", "10-19", "20-49", "50+")
RATING_BINS = ("0", "1", "2", "3", "4", "5")
PAGE_BINS = ("1-100", "101-200", "201-300", "301-400", "401-500", "500+")
TEXT_MIN_CHARS = 10


class Language(str, enum.Enum):
    BANGLA = "Bangla"
    ENGLISH = "English"
    MIXED = "Bangla + English"
    OTHER = "Other"


@dataclass(frozen=True)
class LanguageThresholds:
    dominant: float = 0.9
    mixed: float = 0.1


def _is_bengali(ch: str) -> bool:
    return "ঀ" <= ch <= "৿"


def classify_language(text: str | None, thresholds: LanguageThresholds = LanguageThresholds()) -> Language:
    """Script-share rule over letters; digits, punctuation and symbols are ignored.

    Bengali-block letters and combining signs count as Bengali, ASCII letters
    as Latin, and any other letter only towards the total.
    """
    bengali = latin = total = 0
    for ch in text or "":
        cat = unicodedata.category(ch)
        if cat[0] not in "LM":
            continue
        total += 1
        if _is_bengali(ch):
            bengali += 1
        elif ch.isascii():
            latin += 1
    if total == 0:
        return Language.OTHER
    b, e = bengali / total, latin / total
    if b >= thresholds.dominant:
        return Language.BANGLA
    if e >= thresholds.dominant:
        return Language.ENGLISH
    if b >= thresholds.mixed and e >= thresholds.mixed:
        return Language.MIXED
    return Language.OTHER


def engagement_bin(n: int) -> str:
    return ENGAGEMENT_BINS[min(n, 5)]


def activity_bin(n: int) -> str:
    if n < 1:
        raise ValueError("activity bins start at 1 review")
    for upper, label in ((1, "1"), (4, "2-4"), (9, "5-9"), (19, "10-19"), (49, "20-49")):
        if n <= upper:
            return label
    return "50+"


def rating_bin(rating: float | None) -> str:
    """Missing ratings fall in bin ``0``; others round half up to 1..5."""
    if rating is None or rating <= 0:
        return "0"
    return str(min(max(math.floor(rating + 0.5), 1), 5))


def page_bin(pages: int | None) -> str | None:
    if pages is None or pages < 1:
        return None
    return PAGE_BINS[min((pages - 1) // 100, 5)]


@dataclass
class Histogram:
    bins: tuple[str, ...]
    counts: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def percent(self, label: str) -> float:
        return 100.0 * self.counts[label] / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "bins": [{"bin": b, "count": self.counts[b], "percent": round(self.percent(b), 2)} for b in self.bins],
        }


def _histogram(bins: tuple[str, ...], labels) -> Histogram:
    c = Counter(labels)
    return Histogram(bins, {b: c.get(b, 0) for b in bins})


@dataclass
class PageRow:
    label: str
    books: int
    books_pct: float
    reviews: int
    reviews_pct: float


@dataclass
class DatasetProfile:
    entity_counts: dict[str, int]
    completeness: dict[str, tuple[int, float]]
    review_quality: dict[str, tuple[int, float]]
    engagement: Histogram
    activity: Histogram
    ratings: Histogram
    languages: Histogram
    pages: list[PageRow]
    density: float
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        pair = lambda d: {k: {"count": c, "percent": round(p, 2)} for k, (c, p) in d.items()}  # noqa: E731
        return {
            "entity_counts": self.entity_counts,
            "completeness": pair(self.completeness),
            "review_quality": pair(self.review_quality),
            "book_engagement": self.engagement.to_dict(),
            "user_activity": self.activity.to_dict(),
            "rating_distribution": self.ratings.to_dict(),
            "language_types": self.languages.to_dict(),
            "page_ranges": [
                {"range": r.label, "books": r.books, "books_percent": round(r.books_pct, 2),
                 "reviews": r.reviews, "reviews_percent": round(r.reviews_pct, 2)}
                for r in self.pages
            ],
            "interaction_density": self.density,
            "notes": self.notes,
        }


def _pct(n: int, total: int) -> float:
    return 100.0 * n / total if total else 0.0


def _present(v) -> bool:
    return v is not None and not (isinstance(v, str) and not v.strip())


def compute_profile(graph: BookGraph, thresholds: LanguageThresholds = LanguageThresholds()) -> DatasetProfile:
    books = graph.books
    n_books = len(books)
    cats = graph.adjacency_lists(Relation.BOOK_CATEGORY, K.BOOK)
    pubs = graph.adjacency_lists(Relation.BOOK_PUBLISHER, K.BOOK)
    book_reviews = [len(x) for x in graph.adjacency_lists(Relation.BOOK_REVIEW, K.BOOK)]
    user_reviews = [len(x) for x in graph.adjacency_lists(Relation.USER_REVIEW, K.USER)]

    present = {
        "Title": sum(_present(b.title) for b in books),
        "Book ID": sum(_present(b.id) for b in books),
        "Category": sum(bool(c) for c in cats),
        "Publisher": sum(bool(p) for p in pubs),
        "Rating": sum(b.avg_rating is not None for b in books),
        "Review Count": sum(b.review_count is not None for b in books),
        "Pages": sum(b.pages is not None for b in books),
        "ISBN": sum(_present(b.isbn) for b in books),
        "Summary": sum(_present(b.summary) for b in books),
    }
    completeness = {f: (present[f], _pct(present[f], n_books)) for f in COMPLETENESS_FIELDS}

    reviews = graph.reviews
    n_rev = len(reviews)
    quality_counts = {
        "Verified Purchase": sum(r.verified for r in reviews),
        "Has Rating": sum(r.rating is not None for r in reviews),
        f"Has Text (>{TEXT_MIN_CHARS} chars)": sum(len((r.text or "").strip()) > TEXT_MIN_CHARS for r in reviews),
        "Has Votes": sum((r.upvotes or 0) + (r.downvotes or 0) > 0 for r in reviews),
    }
    quality = {k: (v, _pct(v, n_rev)) for k, v in quality_counts.items()}

    page_books: Counter = Counter()
    page_reviews: Counter = Counter()
    for b, n in zip(books, book_reviews):
        label = page_bin(b.pages)
        if label is not None:
            page_books[label] += 1
            page_reviews[label] += n
    pb_total, pr_total = sum(page_books.values()), sum(page_reviews.values())
    pages = [
        PageRow(lab, page_books[lab], _pct(page_books[lab], pb_total), page_reviews[lab], _pct(page_reviews[lab], pr_total))
        for lab in PAGE_BINS
    ]

    active_users = [n for n in user_reviews if n > 0]
    n_pairs = len({(u, b) for u, b in _review_pairs(graph)})
    cells = len(active_users) * n_books
    notes = []
    if len(active_users) < graph.n_users:
        notes.append(f"{graph.n_users - len(active_users)} users without reviews are left out of the activity table")
    return DatasetProfile(
        entity_counts={k.value: graph.count(k) for k in K},
        completeness=completeness,
        review_quality=quality,
        engagement=_histogram(ENGAGEMENT_BINS, (engagement_bin(n) for n in book_reviews)),
        activity=_histogram(ACTIVITY_BINS, (activity_bin(n) for n in active_users)),
        ratings=_histogram(RATING_BINS, (rating_bin(r.rating) for r in reviews)),
        languages=_histogram(tuple(x.value for x in Language), (classify_language(r.text, thresholds).value for r in reviews)),
        pages=pages,
        density=n_pairs / cells if cells else 0.0,
        notes=notes,
    )


def _review_pairs(graph: BookGraph):
    for r in range(len(graph.reviews)):
        u, b = graph.review_user(r), graph.review_book(r)
        if u is not None and b is not None:
            yield u, b


# ---------------------------------------------------------------------------
# publisher affinity


@dataclass(frozen=True)
class AffinityRow:
    publisher_a: str
    publisher_b: str
    shared: int
    union: int

    @property
    def jaccard(self) -> float:
        return self.shared / self.union if self.union else 0.0


def publisher_author_sets(graph: BookGraph) -> list[set[int]]:
    return [set(x) for x in graph.adjacency_lists(Relation.AUTHOR_PUBLISHER, K.PUBLISHER)]


def jaccard_affinity(graph: BookGraph, top_n: int = 10) -> list[AffinityRow]:
    """Publisher pairs sharing at least one author, by shared count then Jaccard."""
    sets = publisher_author_sets(graph)
    by_author: dict[int, list[int]] = {}
    for p, authors in enumerate(sets):
        for a in authors:
            by_author.setdefault(a, []).append(p)
    pairs = set()
    for pubs in by_author.values():
        pairs.update(combinations(sorted(pubs), 2))
    rows = []
    for p, q in pairs:
        shared = len(sets[p] & sets[q])
        rows.append(AffinityRow(graph.publishers[p].id, graph.publishers[q].id, shared, len(sets[p] | sets[q])))
    rows.sort(key=lambda r: (-r.shared, -r.jaccard, r.publisher_a, r.publisher_b))
    return rows[:top_n]


def category_engagement(graph: BookGraph, top_n: int = 15) -> list[tuple[str, int, int]]:
    """``(category name, books, reviews)`` ranked by reviews then books."""
    cat_books = graph.adjacency_lists(Relation.BOOK_CATEGORY, K.CATEGORY)
    book_reviews = [len(x) for x in graph.adjacency_lists(Relation.BOOK_REVIEW, K.BOOK)]
    rows = [
        (c.name, len(set(cat_books[i])), sum(book_reviews[b] for b in set(cat_books[i])))
        for i, c in enumerate(graph.categories)
    ]
    rows.sort(key=lambda r: (-r[2], -r[1], r[0]))
    return rows[:top_n]


# ---------------------------------------------------------------------------
# text tables


def _table(title: str, header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    line = lambda r: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths)))  # noqa: E731
    return "\n".join([title, line(header), "-" * len(line(header)), *(line(r) for r in rows)]) + "\n"


def _hist_table(title: str, first: str, h: Histogram) -> str:
    rows = [[b, f"{h.counts[b]:,}", f"{h.percent(b):.2f}"] for b in h.bins]
    rows.append(["Total", f"{h.total:,}", ""])
    return _table(title, [first, "Count", "Percentage (%)"], rows)


def format_profile(profile: DatasetProfile, affinity: list[AffinityRow] | None = None) -> str:
    parts = [
        _table("Metadata completeness", ["Field", "Count", "Completeness (%)"],
               [[f, f"{c:,}", f"{p:.1f}"] for f, (c, p) in profile.completeness.items()]),
        _table("Review quality", ["Metric", "Count", "Percentage (%)"],
               [[f, f"{c:,}", f"{p:.1f}"] for f, (c, p) in profile.review_quality.items()]),
        _hist_table("Book engagement", "Reviews per book", profile.engagement),
        _hist_table("User activity", "Reviews per user", profile.activity),
        _hist_table("Rating distribution", "Rating", profile.ratings),
        _hist_table("Review language", "Language type", profile.languages),
        _table("Page ranges", ["Pages", "Books", "Books (%)", "Reviews (%)"],
               [[r.label, f"{r.books:,}", f"{r.books_pct:.2f}", f"{r.reviews_pct:.2f}"] for r in profile.pages]),
    ]
    if affinity:
        parts.append(_table("Publisher affinity", ["Publisher A", "Publisher B", "Shared authors", "Jaccard"],
                            [[r.publisher_a, r.publisher_b, str(r.shared), f"{r.jaccard:.3f}"] for r in affinity]))
    return "\n".join(parts)
