"""Per-book side features: multi-hot entity links, numeric metadata, text vectors."""

from __future__ import annotations

import hashlib
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from bookgraph.graph import BookGraph, EntityKind, Relation
from bookgraph.ingest import normalize_text

NUMERIC_FIELDS = ("price", "pages", "avg_rating", "rating_count", "review_count")
LOG_FIELDS = frozenset({"price", "pages", "rating_count", "review_count"})
DEFAULT_TEXT_DIM = 256


class EmptyVocabularyError(ValueError):
    pass


class EmbeddingFileError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercased runs of letters, combining marks, digits and underscores.

    Combining marks count as word characters so Bangla words are not split
    at vowel signs.
    """
    tokens: list[str] = []
    cur: list[str] = []
    for ch in text.lower():
        if ch == "_" or unicodedata.category(ch)[0] in "LMN":
            cur.append(ch)
        elif cur:
            tokens.append("".join(cur))
            cur = []
    if cur:
        tokens.append("".join(cur))
    return tokens


# ---------------------------------------------------------------------------
# numeric + multi-hot bundle


@dataclass(frozen=True)
class CatalogStats:
    mean: np.ndarray  # per numeric field, over present values after log1p
    std: np.ndarray


@dataclass
class FeatureBundle:
    author_multi_hot: sp.csr_matrix
    category_multi_hot: sp.csr_matrix
    publisher_multi_hot: sp.csr_matrix
    numeric: np.ndarray
    text_embedding: np.ndarray


def _raw_numeric(book) -> list[float | None]:
    vals = []
    for name in NUMERIC_FIELDS:
        v = getattr(book, name)
        if name == "avg_rating" and v == 0:
            v = None  # 0 marks an unrated book
        if v is not None and name in LOG_FIELDS:
            v = math.log1p(max(float(v), 0.0))
        vals.append(None if v is None else float(v))
    return vals


def compute_catalog_stats(graph: BookGraph) -> CatalogStats:
    cols: list[list[float]] = [[] for _ in NUMERIC_FIELDS]
    for b in graph.books:
        for j, v in enumerate(_raw_numeric(b)):
            if v is not None:
                cols[j].append(v)
    mean = np.array([np.mean(c) if c else 0.0 for c in cols])
    std = np.array([np.std(c) if c else 0.0 for c in cols])
    return CatalogStats(mean, std)


def numeric_vector(book, stats: CatalogStats) -> np.ndarray:
    out = np.zeros(len(NUMERIC_FIELDS))
    for j, v in enumerate(_raw_numeric(book)):
        if v is None or stats.std[j] <= 0:
            continue
        out[j] = (v - stats.mean[j]) / stats.std[j]
    return out


def _multi_hot(indices: Sequence[int], dim: int) -> sp.csr_matrix:
    idx = np.asarray(sorted(set(indices)), dtype=np.int64)
    return sp.csr_matrix(
        (np.ones(len(idx)), idx, np.array([0, len(idx)])), shape=(1, dim)
    )


def build_feature_bundle(
    graph: BookGraph,
    book: int,
    stats: CatalogStats | None = None,
    text_embedding: np.ndarray | None = None,
    text_dim: int = DEFAULT_TEXT_DIM,
) -> FeatureBundle:
    if stats is None:
        stats = compute_catalog_stats(graph)
    B = EntityKind.BOOK
    if text_embedding is None:
        text_embedding = hash_text_embed(compose_book_text(graph, book), text_dim)
    return FeatureBundle(
        author_multi_hot=_multi_hot(graph.neighbor_indices(Relation.BOOK_AUTHOR, B, book), graph.count(EntityKind.AUTHOR)),
        category_multi_hot=_multi_hot(graph.neighbor_indices(Relation.BOOK_CATEGORY, B, book), graph.count(EntityKind.CATEGORY)),
        publisher_multi_hot=_multi_hot(graph.neighbor_indices(Relation.BOOK_PUBLISHER, B, book), graph.count(EntityKind.PUBLISHER)),
        numeric=numeric_vector(graph.books[book], stats),
        text_embedding=np.asarray(text_embedding, dtype=np.float64),
    )


def relation_matrix(graph: BookGraph, relation: Relation) -> sp.csr_matrix:
    """Binary books x entities incidence matrix for a book-rooted relation."""
    relation = Relation(relation)
    src_kind, dst_kind = relation.endpoints
    if src_kind is not EntityKind.BOOK:
        raise ValueError(f"{relation.value} is not rooted at books")
    lists = graph.adjacency_lists(relation, EntityKind.BOOK)
    indptr = np.zeros(len(lists) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(x) for x in lists])
    indices = np.fromiter((j for x in lists for j in x), dtype=np.int64, count=int(indptr[-1]))
    return sp.csr_matrix(
        (np.ones(len(indices)), indices, indptr), shape=(len(lists), graph.count(dst_kind))
    )


@dataclass
class FeatureSet:
    """Catalog-wide feature matrices, one row per book."""

    authors: sp.csr_matrix
    categories: sp.csr_matrix
    publishers: sp.csr_matrix
    numeric: np.ndarray
    text: np.ndarray
    text_source: str = "hashing"

    @property
    def n_books(self) -> int:
        return self.numeric.shape[0]

    def bundle(self, book: int) -> FeatureBundle:
        return FeatureBundle(
            self.authors[book],
            self.categories[book],
            self.publishers[book],
            self.numeric[book].copy(),
            self.text[book].copy(),
        )

    def metadata_matrix(self) -> sp.csr_matrix:
        """Concatenated author / category / publisher multi-hot blocks."""
        return sp.hstack([self.authors, self.categories, self.publishers], format="csr")


def build_features(
    graph: BookGraph,
    embeddings: EmbeddingTable | None = None,
    text_dim: int = DEFAULT_TEXT_DIM,
) -> FeatureSet:
    stats = compute_catalog_stats(graph)
    numeric = np.stack([numeric_vector(b, stats) for b in graph.books]) if graph.books else np.zeros((0, len(NUMERIC_FIELDS)))
    if embeddings is not None:
        if embeddings.vectors.shape[0] != graph.n_books:
            raise EmbeddingFileError(
                f"embedding table covers {embeddings.vectors.shape[0]} books, graph has {graph.n_books}"
            )
        text, source = embeddings.vectors.astype(np.float64), embeddings.provenance
    else:
        text = np.zeros((graph.n_books, text_dim))
        for i in range(graph.n_books):
            text[i] = hash_text_embed(compose_book_text(graph, i), text_dim)
        source = "hashing"
    return FeatureSet(
        authors=relation_matrix(graph, Relation.BOOK_AUTHOR),
        categories=relation_matrix(graph, Relation.BOOK_CATEGORY),
        publishers=relation_matrix(graph, Relation.BOOK_PUBLISHER),
        numeric=numeric,
        text=text,
        text_source=source,
    )


# ---------------------------------------------------------------------------
# text


def compose_book_text(graph: BookGraph, book: int) -> str:
    """Title, summary, author names, category names+descriptions, publisher names."""
    B = EntityKind.BOOK
    b = graph.books[book]
    parts: list[str | None] = [b.title, b.summary]
    for a in graph.neighbor_indices(Relation.BOOK_AUTHOR, B, book):
        parts.append(graph.authors[a].name)
    for c in graph.neighbor_indices(Relation.BOOK_CATEGORY, B, book):
        parts += [graph.categories[c].name, graph.categories[c].description]
    for p in graph.neighbor_indices(Relation.BOOK_PUBLISHER, B, book):
        parts += [graph.publishers[p].name, graph.publishers[p].description]
    return normalize_text(" ".join(s for s in parts if s))


def _token_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def hash_text_embed(text: str, dim: int = DEFAULT_TEXT_DIM) -> np.ndarray:
    """Signed feature hashing of unigram tokens, L2-normalized."""
    if dim < 8:
        raise ValueError("hashing dimension must be at least 8")
    v = np.zeros(dim)
    for tok in tokenize(text):
        h = _token_hash(tok)
        v[h % dim] += 1.0 if (h >> 63) & 1 == 0 else -1.0
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


# ---------------------------------------------------------------------------
# TF-IDF


def ngrams(tokens: Sequence[str], ngram_range: tuple[int, int] = (1, 2)) -> list[str]:
    lo, hi = ngram_range
    out = []
    for n in range(lo, hi + 1):
        out.extend(" ".join(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
    return out


@dataclass
class TfidfModel:
    vocabulary: dict[str, int]
    idf: np.ndarray
    df: dict[str, float]  # document-frequency proportion of retained terms
    min_df: float
    max_df: float
    max_features: int
    ngram_range: tuple[int, int] = (1, 2)
    n_documents: int = 0

    @property
    def dim(self) -> int:
        return len(self.vocabulary)


def tfidf_fit(
    documents: Sequence[Sequence[str]],
    min_df: float = 0.2,
    max_df: float = 0.8,
    max_features: int = 5000,
    ngram_range: tuple[int, int] = (1, 2),
) -> TfidfModel:
    """Fit vocabulary and smoothed idf ``ln((1+N)/(1+df)) + 1``.

    Terms are kept when their document-frequency proportion lies in
    ``[min_df, max_df]``; of those, the ``max_features`` most frequent
    (ties by term) form the vocabulary, with columns in term order.
    """
    n = len(documents)
    if n == 0:
        raise ValueError("tfidf_fit needs at least one document")
    df = Counter()
    for doc in documents:
        df.update(set(ngrams(doc, ngram_range)))
    kept = [(t, c) for t, c in df.items() if min_df <= c / n <= max_df]
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    kept = kept[:max_features]
    if not kept:
        raise EmptyVocabularyError(
            f"no term has document frequency in [{min_df}, {max_df}] over {n} documents; "
            "relax the bounds"
        )
    terms = sorted(t for t, _ in kept)
    vocab = {t: j for j, t in enumerate(terms)}
    counts = np.array([df[t] for t in terms], dtype=np.float64)
    idf = np.log((1.0 + n) / (1.0 + counts)) + 1.0
    return TfidfModel(
        vocabulary=vocab,
        idf=idf,
        df={t: df[t] / n for t in terms},
        min_df=min_df,
        max_df=max_df,
        max_features=max_features,
        ngram_range=tuple(ngram_range),
        n_documents=n,
    )


def tfidf_transform_many(model: TfidfModel, documents: Iterable[Sequence[str]]) -> sp.csr_matrix:
    indptr, indices, data = [0], [], []
    for doc in documents:
        tf = Counter(g for g in ngrams(doc, model.ngram_range) if g in model.vocabulary)
        cols = sorted(model.vocabulary[g] for g in tf)
        inv = {model.vocabulary[g]: c for g, c in tf.items()}
        vals = np.array([inv[j] * model.idf[j] for j in cols])
        norm = np.linalg.norm(vals) if len(vals) else 0.0
        if norm > 0:
            vals = vals / norm
        indices.extend(cols)
        data.extend(vals.tolist())
        indptr.append(len(indices))
    return sp.csr_matrix(
        (np.asarray(data, dtype=np.float64), np.asarray(indices, dtype=np.int64), np.asarray(indptr)),
        shape=(len(indptr) - 1, model.dim),
    )


def tfidf_transform(model: TfidfModel, document: Sequence[str]) -> sp.csr_matrix:
    return tfidf_transform_many(model, [document])


# ---------------------------------------------------------------------------
# embedding files: "dim=<D>" then "book_id<TAB>v1,...,vD"


@dataclass
class EmbeddingTable:
    dim: int
    vectors: np.ndarray  # n_books x dim; rows of absent books are zero
    present: np.ndarray  # bool per book
    provenance: str

    def lookup(self, book: int) -> np.ndarray:
        return self.vectors[book]


def load_embeddings(
    path: str | Path,
    expected_book_count: int,
    id_map: Mapping[str, int] | None = None,
) -> EmbeddingTable:
    """Read an embedding file; rows are L2-normalized on load.

    Book ids are resolved through ``id_map`` when given, otherwise they
    must be integer book indices.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if not header.startswith("dim="):
            raise EmbeddingFileError(f"{path}: first line must be 'dim=<D>', got {header!r}")
        try:
            dim = int(header[4:])
        except ValueError:
            raise EmbeddingFileError(f"{path}: bad dimension in header {header!r}") from None
        if dim <= 0:
            raise EmbeddingFileError(f"{path}: dimension must be positive")
        vectors = np.zeros((expected_book_count, dim))
        present = np.zeros(expected_book_count, dtype=bool)
        for lineno, line in enumerate(f, 2):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            try:
                key, values = line.split("\t")
            except ValueError:
                raise EmbeddingFileError(f"{path}:{lineno}: expected 'book_id<TAB>values'") from None
            if id_map is not None:
                if key not in id_map:
                    raise EmbeddingFileError(f"{path}:{lineno}: unknown book id {key!r}")
                idx = id_map[key]
            else:
                idx = int(key)
            if not 0 <= idx < expected_book_count:
                raise EmbeddingFileError(f"{path}:{lineno}: book index {idx} out of range")
            row = np.array([float(x) for x in values.split(",")])
            if row.shape[0] != dim:
                raise EmbeddingFileError(f"{path}:{lineno}: row has {row.shape[0]} values, header says {dim}")
            if present[idx]:
                raise EmbeddingFileError(f"{path}:{lineno}: duplicate book id {key!r}")
            if not np.all(np.isfinite(row)):
                raise EmbeddingFileError(f"{path}:{lineno}: non-finite value")
            norm = np.linalg.norm(row)
            vectors[idx] = row / norm if norm > 0 else row
            present[idx] = True
    return EmbeddingTable(dim, vectors, present, str(path))


def write_embeddings(path: str | Path, vectors: np.ndarray, ids: Sequence[str]) -> None:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[0] != len(ids):
        raise ValueError("one id per vector row required")
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"dim={vectors.shape[1]}\n")
        for key, row in zip(ids, vectors):
            f.write(key + "\t" + ",".join(repr(float(x)) for x in row) + "\n")
