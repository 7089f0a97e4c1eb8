import math
from itertools import permutations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_metrics

from bookgraph.metrics import metrics_at_k


def test_known_values():
    assert metrics_at_k([5, 1, 2], {1}, 10) == (1.0, 0.5, pytest.approx(1 / math.log2(3)))
    assert metrics_at_k([1, 2, 3], {9}, 3) == (0.0, 0.0, 0.0)
    # more relevant items than k: ideal DCG uses k positions
    hit, mrr, ndcg = metrics_at_k([1, 2], {1, 2, 3}, 2)
    assert (hit, mrr, ndcg) == (1.0, 1.0, pytest.approx(1.0))


def test_cutoff_excludes_late_hits():
    assert metrics_at_k([0, 1, 2, 3, 4, 7], {7}, 5) == (0.0, 0.0, 0.0)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        metrics_at_k([1], set(), 5)
    with pytest.raises(ValueError):
        metrics_at_k([1], {1}, 0)


def test_exhaustive_small():
    # every ordering of 5 items against every non-empty relevant subset
    items = range(5)
    for perm in permutations(items):
        for mask in range(1, 32):
            rel = {i for i in items if mask >> i & 1}
            for k in (1, 3, 5):
                got = metrics_at_k(list(perm), rel, k)
                assert got == pytest.approx(brute_metrics(perm, rel, k), abs=1e-12)


@settings(max_examples=200)
@given(
    st.lists(st.integers(0, 40), unique=True, max_size=30),
    st.sets(st.integers(0, 40), min_size=1, max_size=10),
    st.integers(1, 50),
)
def test_matches_oracle(ranked, rel, k):
    got = metrics_at_k(ranked, rel, k)
    assert got == pytest.approx(brute_metrics(ranked, rel, k), abs=1e-12)
    assert all(0.0 <= v <= 1.0 for v in got)


def test_spec_style_examples():
    assert metrics_at_k([4, 0, 1], {4}, 10) == (1.0, 1.0, 1.0)
    hit, mrr, ndcg = metrics_at_k([0, 1, 4], {4}, 10)
    assert mrr == pytest.approx(1 / 3) and ndcg == pytest.approx(0.5)
    assert metrics_at_k(list(range(11)), {10}, 10) == (0.0, 0.0, 0.0)


@settings(max_examples=100)
@given(st.permutations(list(range(8))), st.sets(st.integers(0, 7), min_size=1))
def test_monotone_in_k_and_perfect_ndcg(ranked, rel):
    # with IDCG over min(|rel|, K) positions NDCG can drop while K < |rel|
    # ([0, 1, ...] against {0, 2}: 1.0 at K=1, 0.61 at K=2); from K = |rel| on it cannot
    prev_hit, prev_ndcg = 0.0, 0.0
    for k in range(1, 9):
        hit, mrr, ndcg = metrics_at_k(ranked, rel, k)
        assert hit >= prev_hit
        if k > len(rel):
            assert ndcg >= prev_ndcg - 1e-12
        prev_hit, prev_ndcg = hit, ndcg
        perfect = all(b in rel for b in ranked[: min(len(rel), k)])
        assert (abs(ndcg - 1.0) < 1e-12) == perfect


def test_ndcg_can_drop_below_relevant_count():
    assert metrics_at_k([0, 1, 2], {0, 2}, 1)[2] == 1.0
    assert metrics_at_k([0, 1, 2], {0, 2}, 2)[2] < 1.0
