import json
import math
import unicodedata

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bookgraph.graph import EntityKind, Relation, load_graph, read_interactions, validate_graph
from bookgraph.ingest import (
    IngestError,
    RawRecord,
    SplitSpec,
    anonymize_users,
    clamp_rating,
    dedup_records,
    ingest_records,
    is_user_id,
    link_entities,
    normalize_numeric,
    normalize_text,
    run_ingest,
    split_interactions,
)
from bookgraph.synthetic import random_interactions, to_raw_records, write_raw_dir

K = EntityKind


def rec(kind, url="", **payload):
    return RawRecord(url, K(kind), payload)


@pytest.mark.parametrize(
    "raw, want",
    [("1,250", 1250.0), ("১২৩", 123.0), ("abc", None), ("৳ 350", 350.0), ("", None), (None, None), (42, 42.0)],
)
def test_normalize_numeric(raw, want):
    assert normalize_numeric(raw) == want


@settings(max_examples=100)
@given(st.integers(0, 10**9))
def test_numeric_fixed_point_for_integers(n):
    v = normalize_numeric(str(n))
    assert v == n and normalize_numeric(str(int(v))) == v


@pytest.mark.parametrize("raw, want", [(7.2, 5.0), (3.5, 3.5), (0.2, 1.0), (None, None)])
def test_clamp_rating(raw, want):
    assert clamp_rating(raw) == want


@settings(max_examples=200)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_clamp_rating_range(x):
    assert 1.0 <= clamp_rating(x) <= 5.0


def test_normalize_text():
    assert normalize_text("  a  b ") == "a b"
    assert normalize_text("plain ascii") == "plain ascii"
    # precomposed Bangla o-kar decomposes to e-kar + aa-kar
    composed = "ো"
    assert normalize_text(composed) == unicodedata.normalize("NFD", composed) == "ো"
    with pytest.raises(UnicodeDecodeError):
        normalize_text(b"\xff\xfe")


def test_dedup_by_url_and_id():
    same_url = [rec("book", "https://x.com/b/1", id="1"), rec("book", "HTTPS://X.com/b/1#top", id="2")]
    r = dedup_records(same_url)
    assert len(r.kept) == 1 and r.dropped_count == 1
    same_id = [rec("book", "https://x.com/b/1", id="7"), rec("book", "https://x.com/other", id="7")]
    r = dedup_records(same_id)
    assert len(r.kept) == 1 and r.dropped_count == 1
    r = dedup_records([rec("book", "", title="orphan")])
    assert r.kept == [] and len(r.quarantined) == 1


def test_dedup_rate_on_planted_corpus():
    base = [rec("book", f"https://x.com/b/{i}", id=str(i)) for i in range(869)]
    dups = [rec("book", f"https://x.com/b/{i}", id=str(i)) for i in range(131)]
    r = dedup_records(base + dups)
    assert r.dropped_count / 1000 == pytest.approx(0.131)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 8)), max_size=30))
def test_dedup_partition(pairs):
    records = [rec("book", f"u{a}", id=str(b)) for a, b in pairs]
    r = dedup_records(records)
    keys = [k for x in r.kept for k in (("u", x.source_url), ("i", x.entity_id))]
    assert len(keys) == len(set(keys))
    assert len(r.kept) + r.dropped_count + len(r.quarantined) == len(records)


def test_anonymize_sequential_and_strips_pii():
    out = anonymize_users([
        rec("review", id="1", user="x", email="x@y.z"),
        rec("review", id="2", user="y"),
        rec("review", id="3", user="x"),
    ])
    assert [r.payload["user"] for r in out] == ["USER000001", "USER000002", "USER000001"]
    assert "email" not in out[0].payload
    assert is_user_id("USER544691") and not is_user_id("alice")


@settings(max_examples=50)
@given(st.lists(st.sampled_from("abcdefgh"), max_size=30))
def test_anonymize_is_bijection(keys):
    out = anonymize_users([rec("review", id=str(i), user_id=k) for i, k in enumerate(keys)])
    mapping = {}
    for k, r in zip(keys, out):
        assert mapping.setdefault(k, r.payload["user"]) == r.payload["user"]
    assert len(set(mapping.values())) == len(mapping)


def test_link_entities():
    index = {k: {} for k in EntityKind}
    index[K.BOOK] = {"b1": 0}
    index[K.AUTHOR] = {"a1": 0, "a2": 1}
    ok = link_entities([rec("book", id="b1", author_ids=["a1", "a2"])], index)
    assert len(ok.edges) == 2 and ok.unresolved == 0
    bad = link_entities([rec("book", id="b1", publisher_ids=["p9"])], index)
    assert bad.edges == [] and bad.unresolved == 1


@pytest.mark.parametrize("n, sizes", [(100, (70, 15, 15)), (1, (0, 0, 1)), (7, (4, 1, 2))])
def test_split_sizes(n, sizes):
    split = split_interactions(random_interactions(n, 5, 5), SplitSpec(seed=3))
    assert split.sizes() == sizes


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 300), st.integers(0, 10**6))
def test_split_partitions(n, seed):
    inter = random_interactions(n, 10, 10)
    a = split_interactions(inter, SplitSpec(seed=seed))
    b = split_interactions(inter, SplitSpec(seed=seed))
    idx = np.concatenate([a.train_index, a.valid_index, a.test_index])
    assert sorted(idx.tolist()) == list(range(n))
    assert np.array_equal(a.test_index, b.test_index)
    assert len(a.train) == math.floor(0.7 * n)


def test_split_spec_rejects_bad_fractions():
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.3, 0.3)


def test_ingest_round_trip(small_data, tmp_path):
    raw = tmp_path / "raw"
    write_raw_dir(small_data.graph, raw)
    result = run_ingest(raw, tmp_path / "out")
    g = small_data.graph
    assert result.report["entities"]["book"] == g.n_books
    assert result.report["edges"]["book_category"] == len(g.edges(Relation.BOOK_CATEGORY))
    assert result.report["unresolved"] == 0 and result.skipped == 0
    assert len(result.interactions) == len(small_data.interactions)

    h = load_graph(tmp_path / "out")
    assert validate_graph(h).ok
    # users are renamed but keep first-appearance order of the review stream
    assert all(is_user_id(u.id) for u in h.users)
    inter = read_interactions(tmp_path / "out" / "interactions.tsv", h)
    assert [(x.book, x.weight, x.timestamp) for x in inter] == [
        (x.book, x.weight, x.timestamp) for x in small_data.interactions
    ]


def test_ingest_is_deterministic(small_data, tmp_path):
    write_raw_dir(small_data.graph, tmp_path / "raw")
    run_ingest(tmp_path / "raw", tmp_path / "a")
    run_ingest(tmp_path / "raw", tmp_path / "b")
    for name in ("interactions.tsv", "ingest_report.json", "entities/user.jsonl", "edges/user_review.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_ingest_quarantines_bad_lines(tmp_path):
    raw = tmp_path / "raw"
    raw.mkdir()
    lines = [
        json.dumps({"source_url": "https://x/b/1", "entity_kind": "book", "payload": {"id": "b1", "title": "T", "publisher_ids": ["p9"]}}),
        "{not json",
        json.dumps({"source_url": "https://x/b/2", "entity_kind": "book", "payload": {"id": "b2"}}),
        json.dumps({"source_url": "https://x/r/1", "entity_kind": "review", "payload": {"id": "r1", "book_id": "b1", "rating": "4"}}),
    ]
    (raw / "all.jsonl").write_text("\n".join(lines) + "\n")
    result = run_ingest(raw, tmp_path / "out")
    assert result.report["malformed_lines"] == 1
    assert result.report["quarantined"] == 2
    assert result.report["unresolved"] == 1
    assert result.skipped == 1
    assert len((tmp_path / "out" / "quarantine.jsonl").read_text().splitlines()) == 2


def test_ingest_empty_dir(tmp_path):
    with pytest.raises(IngestError):
        run_ingest(tmp_path, tmp_path / "out")


def test_rating_zero_means_missing():
    r = ingest_records([
        rec("book", "https://x/b/1", id="b1", title="T"),
        rec("review", "https://x/r/1", id="r1", book_id="b1", user_id="u", rating="0"),
        rec("review", "https://x/r/2", id="r2", book_id="b1", user_id="u", rating="7"),
    ])
    assert [x.rating for x in r.graph.reviews] == [None, 5.0]


def test_raw_records_carry_references(small_data):
    books = [r for r in to_raw_records(small_data.graph) if r["entity_kind"] == "book"]
    assert all(len(r["payload"]["author_ids"]) == 1 for r in books)
