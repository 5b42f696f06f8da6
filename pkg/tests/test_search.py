import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fixedprint import ExactSearcher, Gallery, GalleryRecord, Template, search_topk
from fixedprint.errors import InvalidInputError
from fixedprint.search import split_ranges
from fixedprint.template import CompressedTemplate, compress_rows

from conftest import unit


def oracle(matrix, q, k):
    """Full sort of float64 scores: descending score, ascending ordinal."""
    s = matrix.astype(np.float64) @ q.astype(np.float64)
    order = sorted(range(len(s)), key=lambda i: (-s[i], i))
    return order[:k]


def test_hand_built_three():
    e = np.eye(192, dtype=np.float32)
    q = e[0]
    rows = []
    for s in (0.9, 0.1, 0.5):
        v = s * e[0] + np.sqrt(1 - s * s) * e[1]
        rows.append(v)
    res = ExactSearcher(np.array(rows)).search(q, 2)
    assert res.ordinals == [0, 2]
    assert res.scores == pytest.approx([0.9, 0.5], abs=1e-6)
    assert [c.score.tag for c in res] == ["cosine", "cosine"]


def test_k_at_least_n(rng):
    m = unit(rng, 7)
    res = ExactSearcher(m).search(m[3], 50)
    assert len(res) == 7 and res.k == 50
    assert res.ordinals[0] == 3
    assert res.scores == sorted(res.scores, reverse=True)


def test_matches_full_sort_oracle(rng):
    m = unit(rng, 10_000)
    es = ExactSearcher(m)
    for _ in range(5):
        q = unit(rng, 1)[0]
        want = np.lexsort((np.arange(len(m)), -es.scores(q).astype(np.float64)))[:100]
        got = es.search(q, 100).ordinals
        assert got == want.tolist()
        # float64 oracle agrees on the ranking up to float32 rounding of scores
        assert set(got[:90]) <= set(oracle(m, q, 100))


def test_ties_broken_by_ordinal(rng):
    row = unit(rng, 1)[0]
    m = np.tile(row, (9000, 1))  # spans several blocks
    res = ExactSearcher(m, block_rows=1024).search(row, 20, shards=4)
    assert res.ordinals == list(range(20))


@pytest.mark.parametrize("shards", [1, 2, 3, 4, 8, 64])
def test_shard_count_does_not_change_results(rng, shards):
    m = unit(rng, 20_000)
    m[100:150] = m[7]
    es = ExactSearcher(m)
    q = m[7]
    assert es.search(q, 100, shards).ordinals == es.search(q, 100, 1).ordinals


@given(st.integers(1, 3000), st.integers(1, 40), st.integers(1, 9), st.integers(0, 2**31))
def test_topk_property(n, k, shards, seed):
    r = np.random.default_rng(seed)
    m = unit(r, n)
    if n > 3:
        m[r.integers(0, n, n // 3)] = m[0]
    es = ExactSearcher(m, block_rows=256)
    q = m[0] if seed % 2 else unit(r, 1)[0]
    want = np.lexsort((np.arange(n), -es.scores(q).astype(np.float64)))[:k]
    assert es.search(q, k, shards).ordinals == want.tolist()


def test_search_topk_over_gallery(rng):
    rows = unit(rng, 30)
    codes, lo, hi = compress_rows(rows)
    g = Gallery(GalleryRecord(f"s{i}", 1, CompressedTemplate(codes[i], lo[i], hi[i]))
                for i in range(30))
    res = search_topk(Template(rows[5]), g, 3)
    assert res.ordinals[0] == 5
    assert res.keys[0] == ("s5", 1)


def test_errors_and_empty(rng):
    es = ExactSearcher(unit(rng, 3))
    with pytest.raises(InvalidInputError):
        es.search(unit(rng, 1)[0], 0)
    with pytest.raises(InvalidInputError):
        es.search(np.ones(10), 1)
    assert len(ExactSearcher(np.zeros((0, 192))).search(unit(rng, 1)[0], 3)) == 0


def test_split_ranges():
    assert split_ranges(10, 3) == [(0, 3), (3, 7), (7, 10)]
    assert split_ranges(2, 8) == [(0, 1), (1, 2)]
    assert split_ranges(0, 4) == [(0, 0)]
