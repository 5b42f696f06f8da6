import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fixedprint import ExactSearcher, PQIndex, pq_search_topk
from fixedprint.errors import FormatError, InvalidInputError, VersionError
from fixedprint.pq import build_table, code_bytes, kmeans, pack_codes, quantize, train, \
    unpack_codes

from conftest import unit


@pytest.fixture(scope="module")
def small_index():
    rng = np.random.default_rng(7)
    data = unit(rng, 3000)
    return data, PQIndex.build(data, m=64, z=32, seed=3, max_iter=25)


def brute_codes(idx, x):
    out = []
    for i in range(idx.m):
        sub = x[i * idx.sub:(i + 1) * idx.sub].astype(np.float64)
        d = ((idx.codebooks[i].astype(np.float64) - sub) ** 2).sum(axis=1)
        out.append(int(np.flatnonzero(d == d.min())[0]))
    return out


def test_kmeans_single_cluster_is_mean(rng):
    x = rng.standard_normal((500, 3))
    c, _ = kmeans(x, 1, seed=0)
    assert np.allclose(c[0], x.mean(axis=0))


def test_kmeans_distinct_points_zero_distortion(rng):
    x = rng.standard_normal((16, 3))
    c, dist = kmeans(x, 16, seed=0)
    assert dist == 0.0
    assert sorted(map(tuple, c)) == sorted(map(tuple, x))


def test_kmeans_beats_random_assignment(rng):
    x = rng.standard_normal((4000, 3))
    _, dist = kmeans(x, 64, seed=1)
    labels = rng.integers(0, 64, len(x))
    cents = np.array([x[labels == j].mean(axis=0) for j in range(64)])
    random_dist = ((x - cents[labels]) ** 2).sum(axis=1).mean()
    assert dist <= random_dist


def test_kmeans_deterministic(rng):
    x = rng.standard_normal((2000, 3))
    assert np.array_equal(kmeans(x, 32, seed=5)[0], kmeans(x, 32, seed=5)[0])


def test_kmeans_empty_cluster_repair():
    # many duplicates: seeding can pick the same location twice
    x = np.vstack([np.zeros((300, 2)), np.ones((5, 2)), np.full((5, 2), 2.0)])
    c, _ = kmeans(x, 3, seed=0)
    assert np.all(np.isfinite(c))


def test_train_errors(rng):
    with pytest.raises(InvalidInputError):
        train(unit(rng, 10), m=64, z=16)
    with pytest.raises(InvalidInputError):
        train(unit(rng, 300), m=5, z=16)
    with pytest.raises(InvalidInputError):
        train(unit(rng, 300), m=64, z=300)


def test_train_shapes(small_index):
    _, idx = small_index
    assert idx.codebooks.shape == (64, 32, 3)
    assert idx.codebook(5).sub_index == 5


def test_quantize_matches_brute_force(small_index, rng):
    _, idx = small_index
    for q in unit(rng, 20):
        assert quantize(idx, q).tolist() == brute_codes(idx, q)


def test_quantize_centroid_assembly(small_index, rng):
    _, idx = small_index
    want = rng.integers(0, idx.z, idx.m)
    vec = idx.reconstruct(want)
    assert idx.quantize_rows(vec[None, :])[0].tolist() == want.tolist()


def test_quantize_idempotent(small_index):
    data, idx = small_index
    codes = idx.codes[:50]
    again = idx.quantize_rows(np.stack([idx.reconstruct(c) for c in codes]))
    assert np.array_equal(again, codes)


def test_table_entries(small_index, rng):
    _, idx = small_index
    q = unit(rng, 1)[0]
    table = build_table(idx, q)
    assert table.shape == (64, 32) and np.all(table >= 0)
    for i, j in [(0, 0), (10, 7), (63, 31)]:
        sub = q[i * 3:(i + 1) * 3].astype(np.float64)
        assert table[i, j] == pytest.approx(((sub - idx.codebooks[i, j]) ** 2).sum(), abs=1e-12)
    c = idx.codebooks[:, 4, :].reshape(-1).astype(np.float32)
    assert np.all(build_table(idx, c)[:, 4] == 0)


def test_distance_identity(small_index, rng):
    data, idx = small_index
    recon = idx.codebooks[np.arange(64)[None, :], idx.codes.astype(np.int64)].reshape(len(idx), -1)
    for q in unit(rng, 5):
        naive = ((recon.astype(np.float64) - q.astype(np.float64)) ** 2).sum(axis=1)
        assert np.max(np.abs(idx.distances(q) - naive)) <= 1e-6


def test_search_ranks_by_distance(small_index, rng):
    _, idx = small_index
    q = unit(rng, 1)[0]
    d = idx.distances(q)
    want = np.lexsort((np.arange(len(d)), d))[:25].tolist()
    for shards in (1, 3, 8):
        res = pq_search_topk(idx, q, 25, shards)
        assert res.ordinals == want
        assert all(c.score.tag == "pq-distance" for c in res)
        assert res.scores == pytest.approx(d[want].tolist())


def test_reconstruction_probe_ranks_first(small_index):
    _, idx = small_index
    probe = idx.reconstruct(idx.codes[123]).astype(np.float32)
    res = idx.search(probe, 3)
    top = [o for o in res.ordinals if res.scores[res.ordinals.index(o)] == res.scores[0]]
    assert 123 in top and res.scores[0] == pytest.approx(0.0, abs=1e-12)


def test_ties_by_ordinal():
    books = np.zeros((64, 2, 3), np.float32)
    books[:, 1, :] = 1.0
    idx = PQIndex(books, np.zeros((10, 64), np.uint8))
    assert idx.search(np.ones(192, np.float32) / math.sqrt(192), 4).ordinals == [0, 1, 2, 3]


def test_empty_index(small_index, rng):
    _, idx = small_index
    assert len(PQIndex(idx.codebooks).search(unit(rng, 1)[0], 5)) == 0


def test_recall_not_worse_with_more_centroids(rng):
    centers = unit(rng, 400)
    data = (centers[rng.integers(0, 400, 6000)] + 0.15 * rng.standard_normal((6000, 192)))
    data = (data / np.linalg.norm(data, axis=1, keepdims=True)).astype(np.float32)
    probes = data[rng.choice(6000, 150, replace=False)] + 0.05 * rng.standard_normal((150, 192))
    probes = (probes / np.linalg.norm(probes, axis=1, keepdims=True)).astype(np.float32)
    es = ExactSearcher(data)
    truth = [es.search(p, 1).ordinals[0] for p in probes]
    recalls = []
    for z in (16, 64, 256):
        idx = PQIndex.build(data, m=64, z=z, seed=0, max_iter=20)
        recalls.append(np.mean([idx.search(p, 1).ordinals[0] == t for p, t in zip(probes, truth)]))
    assert recalls[0] <= recalls[1] <= recalls[2]


@given(st.sampled_from([2, 3, 4, 16, 17, 100, 256]), st.integers(0, 50), st.integers(0, 2**31))
def test_pack_unpack(z, n, seed):
    r = np.random.default_rng(seed)
    codes = r.integers(0, z, (n, 8)).astype(np.uint8)
    blob = pack_codes(codes, z)
    assert len(blob) == n * code_bytes(8, z)
    assert np.array_equal(unpack_codes(blob, n, 8, z), codes)


def test_code_sizes():
    assert code_bytes(64, 256) == 64
    assert code_bytes(64, 16) == 32


def test_file_round_trip(tmp_path, small_index):
    _, idx = small_index
    path = tmp_path / "i.dppq"
    idx.save(path)
    back = PQIndex.load(path)
    assert path.read_bytes() == back.to_bytes() == idx.to_bytes()
    assert np.array_equal(back.codes, idx.codes)
    head = path.read_bytes()[:18]
    assert head[:4] == b"DPPQ"


def test_file_errors(small_index):
    _, idx = small_index
    blob = idx.to_bytes()
    with pytest.raises(FormatError):
        PQIndex.from_bytes(blob[:-1])
    with pytest.raises(FormatError):
        PQIndex.from_bytes(b"NOPE" + blob[4:])
    with pytest.raises(VersionError):
        PQIndex.from_bytes(blob[:4] + b"\x07\x00" + blob[6:])
    with pytest.raises(FormatError):
        PQIndex.from_bytes(blob[:10])
