import numpy as np
import pytest

from uncertain_ann.core import EmbeddingTable
from uncertain_ann.hnsw import (ConfigError, CorruptionError, assign_levels, brute_force_knn, build_index, knn_search,
                                load_index, save_index)


def _table(rng, count, dim=8, offset=0):
    return EmbeddingTable(np.arange(count) * 3 + offset, rng.standard_normal((count, dim)))


def check_valid(index, table):
    ids = set(int(i) for i in index.ids)
    assert ids == set(int(i) for i in table.ids)
    for li in range(1, index.max_layer + 1):
        assert set(index.layers[li]) <= set(index.layers[li - 1])
    worst = 0.0
    for li, p, e in index.iter_edges():
        budget = 2 * index.n if li == 0 else index.n
        assert len(e) <= budget
        assert all(q in index.layers[li] for q in e.nbr.tolist())
        assert p not in e.nbr.tolist()
        assert np.all(np.diff(e.raw) >= 0)
        assert np.all(e.weighted >= 0) and np.array_equal(e.weighted, e.raw) and not e.var.any()
        d = np.linalg.norm(index.vectors[e.nbr].astype(np.float64) - index.vectors[p].astype(np.float64), axis=1)
        if len(d):
            worst = max(worst, float(np.max(np.abs(d - e.raw))))
    assert worst <= 1e-6


def test_singleton():
    index = build_index(EmbeddingTable([42], [[1.0, 2.0]]), n=4)
    assert index.entry_point == 42
    assert all(len(e) == 0 for _, _, e in index.iter_edges())
    assert knn_search(index, [0.0, 0.0], 3, 5) == [(42, pytest.approx(np.sqrt(5.0)))]


def test_collinear_neighbors_sorted():
    index = build_index(EmbeddingTable([0, 1, 3], [[0.0], [1.0], [3.0]]), n=2)
    assert index.neighbors(0) == [1, 3]
    assert index.neighbors(1) == [0, 3]
    assert index.neighbors(3) == [1, 0]
    assert list(index.edges(3).raw) == [2.0, 3.0]


def test_rejects_bad_params():
    table = EmbeddingTable([0, 1], [[0.0], [1.0]])
    with pytest.raises(ConfigError):
        build_index(table, n=1)
    with pytest.raises(ConfigError):
        build_index(EmbeddingTable([], np.zeros((0, 2))), n=4)
    with pytest.raises(ConfigError):
        knn_search(build_index(table, n=2), [0.0], 5, 2)


def test_structure_invariants(rng):
    table = _table(rng, 600, dim=6)
    index = build_index(table, n=8, ef_construction=40, seed=3)
    assert index.max_layer >= 1
    check_valid(index, table)


def test_level_distribution():
    levels = assign_levels(200000, 16, seed=0)
    # P(level >= 1) = 1/n under floor(-ln U / ln n)
    assert abs(np.mean(levels >= 1) - 1 / 16) < 0.003
    assert abs(np.mean(levels >= 2) - 1 / 256) < 0.001


def test_exact_hit_and_saturation(rng):
    table = _table(rng, 60, dim=4)
    index = build_index(table, n=4, ef_construction=20)
    target = int(table.ids[17])
    res = knn_search(index, table[target], 1, 10)
    assert res[0] == (target, 0.0)
    everything = knn_search(index, rng.standard_normal(4), 100, 100)
    assert sorted(i for i, _ in everything) == sorted(int(i) for i in table.ids)
    assert [d for _, d in everything] == sorted(d for _, d in everything)


def test_search_matches_scan_on_500(rng):
    table = _table(rng, 500, dim=16)
    index = build_index(table, n=16, ef_construction=100, seed=1)
    hits = total = 0
    for _ in range(100):
        q = rng.standard_normal(16)
        got = knn_search(index, q, 10, 50)
        top = {i for i, _ in brute_force_knn(table, q, 50)}
        exact = {i for i, _ in brute_force_knn(table, q, 10)}
        assert {i for i, _ in got} <= top
        hits += len({i for i, _ in got} & exact)
        total += 10
    assert hits / total >= 0.99


def test_deterministic_bytes(tmp_path, rng):
    table = _table(rng, 300)
    a, b = build_index(table, n=6, seed=9), build_index(table, n=6, seed=9)
    save_index(a, tmp_path / "a.uhnw")
    save_index(b, tmp_path / "b.uhnw")
    assert (tmp_path / "a.uhnw").read_bytes() == (tmp_path / "b.uhnw").read_bytes()
    c = build_index(table, n=6, seed=10)
    assert c != a


def test_round_trip(tmp_path, rng):
    table = _table(rng, 100)
    index = build_index(table, n=6, seed=2)
    save_index(index, tmp_path / "i.uhnw")
    back = load_index(tmp_path / "i.uhnw")
    assert back == index
    queries = rng.standard_normal((20, 8))
    for q in queries:
        assert knn_search(back, q, 5, 20) == knn_search(index, q, 5, 20)


def test_corruption_detected(tmp_path, rng):
    index = build_index(_table(rng, 50), n=4)
    save_index(index, tmp_path / "i.uhnw")
    data = (tmp_path / "i.uhnw").read_bytes()
    (tmp_path / "t.uhnw").write_bytes(data[:-7])
    with pytest.raises(CorruptionError):
        load_index(tmp_path / "t.uhnw")
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    (tmp_path / "f.uhnw").write_bytes(bytes(flipped))
    with pytest.raises(CorruptionError, match="checksum"):
        load_index(tmp_path / "f.uhnw")
    (tmp_path / "e.uhnw").write_bytes(b"")
    with pytest.raises(CorruptionError):
        load_index(tmp_path / "e.uhnw")


def test_empty_query_cases(rng):
    index = build_index(_table(rng, 10), n=4)
    assert knn_search(index, np.zeros(8), 0, 5) == []
