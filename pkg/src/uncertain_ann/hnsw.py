"""Hierarchical navigable small-world graph over item embeddings.

Nodes are stored by position, with positions ordered by ascending item id so that
every ``(distance, position)`` comparison implements the "ties by item id" rule.
Each directed edge carries ``raw`` (L2 distance), ``var`` and ``weighted`` payloads;
reweighting and pruning live in :mod:`uncertain_ann.un_index`.
"""

from __future__ import annotations

import heapq
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import _kernels
from .core import EmbeddingTable

INDEX_MAGIC = b"UHNW"
INDEX_VERSION = 1


class ConfigError(ValueError):
    pass


class CorruptionError(ValueError):
    pass


@dataclass
class EdgeList:
    nbr: np.ndarray       # neighbor positions
    raw: np.ndarray
    var: np.ndarray
    weighted: np.ndarray

    def __len__(self) -> int:
        return len(self.nbr)

    def copy(self) -> "EdgeList":
        return EdgeList(self.nbr.copy(), self.raw.copy(), self.var.copy(), self.weighted.copy())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EdgeList):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("nbr", "raw", "var", "weighted"))


@dataclass
class LayeredGraphIndex:
    ids: np.ndarray                  # (N,) ascending item ids
    vectors: np.ndarray              # (N, d) float32
    levels: np.ndarray               # (N,) top layer per node
    layers: List[Dict[int, EdgeList]]
    entry: int                       # entry position
    n: int
    ef_construction: int
    seed: int
    provenance: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._pos = {int(i): p for p, i in enumerate(self.ids)}
        self._X = self.vectors.astype(np.float64)

    @property
    def max_layer(self) -> int:
        return len(self.layers) - 1

    @property
    def entry_point(self) -> Optional[int]:
        return int(self.ids[self.entry]) if len(self.ids) else None

    def __len__(self) -> int:
        return len(self.ids)

    def position(self, item: int) -> int:
        try:
            return self._pos[int(item)]
        except KeyError:
            raise KeyError(f"item {item} is not in the index") from None

    def contains(self, item: int, layer: int = 0) -> bool:
        p = self._pos.get(int(item))
        return p is not None and layer < len(self.layers) and p in self.layers[layer]

    def neighbors(self, item: int, layer: int = 0) -> List[int]:
        edges = self.layers[layer][self.position(item)]
        return [int(self.ids[q]) for q in edges.nbr]

    def edges(self, item: int, layer: int = 0) -> EdgeList:
        return self.layers[layer][self.position(item)]

    def items_at(self, layer: int) -> List[int]:
        return [int(self.ids[p]) for p in sorted(self.layers[layer])]

    def copy(self) -> "LayeredGraphIndex":
        return LayeredGraphIndex(
            ids=self.ids.copy(),
            vectors=self.vectors.copy(),
            levels=self.levels.copy(),
            layers=[{p: e.copy() for p, e in layer.items()} for layer in self.layers],
            entry=self.entry,
            n=self.n,
            ef_construction=self.ef_construction,
            seed=self.seed,
            provenance=dict(self.provenance),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LayeredGraphIndex):
            return NotImplemented
        return (
            np.array_equal(self.ids, other.ids)
            and np.array_equal(self.vectors, other.vectors)
            and np.array_equal(self.levels, other.levels)
            and self.entry == other.entry
            and (self.n, self.ef_construction, self.seed) == (other.n, other.ef_construction, other.seed)
            and self.provenance == other.provenance
            and len(self.layers) == len(other.layers)
            and all(a.keys() == b.keys() and all(a[k] == b[k] for k in a) for a, b in zip(self.layers, other.layers))
        )

    def iter_edges(self):
        """Yield ``(layer, source position, EdgeList)`` in a fixed order."""
        for li, layer in enumerate(self.layers):
            for p in sorted(layer):
                yield li, p, layer[p]


# -------------------------------------------------------------- construction


class _Builder:
    """Insertion state: per layer, padded (N, max_degree) neighbor and distance rows kept sorted."""

    def __init__(self, X: np.ndarray, n: int, ef_construction: int) -> None:
        self.X = X
        self.n = n
        self.efc = ef_construction
        self.nbr: List[np.ndarray] = []
        self.dst: List[np.ndarray] = []
        self.deg: List[np.ndarray] = []
        self.members: List[set] = []
        self.entry = -1
        self.entry_level = -1

    def max_degree(self, layer: int) -> int:
        return 2 * self.n if layer == 0 else self.n

    def _add_layer(self) -> None:
        N, m = len(self.X), self.max_degree(len(self.nbr))
        self.nbr.append(np.full((N, m), -1, dtype=np.int64))
        self.dst.append(np.full((N, m), np.inf))
        self.deg.append(np.zeros(N, dtype=np.int64))
        self.members.append(set())

    def search_layer(self, q: np.ndarray, eps: List[Tuple[float, int]], ef: int, layer: int) -> List[Tuple[float, int]]:
        ep_d = np.array([d for d, _ in eps], dtype=np.float64)
        ep_p = np.array([p for _, p in eps], dtype=np.int64)
        out_d, out_p = _kernels.search_padded(self.X, self.nbr[layer], self.deg[layer], q, ep_d, ep_p, ef)
        return list(zip(out_d.tolist(), out_p.tolist()))

    def connect(self, layer: int, p: int, q: int, d: float) -> None:
        _kernels.connect(self.nbr[layer], self.dst[layer], self.deg[layer], p, q, d)

    def insert(self, p: int, level: int) -> None:
        while len(self.nbr) <= level:
            self._add_layer()
        for li in range(level + 1):
            self.members[li].add(p)
        if self.entry < 0:
            self.entry, self.entry_level = p, level
            return
        q = self.X[p]
        d0 = float(_kernels.l2(self.X, self.entry, q))
        eps = [(d0, self.entry)]
        for li in range(self.entry_level, level, -1):
            eps = self.search_layer(q, eps, 1, li)[:1]
        for li in range(min(self.entry_level, level), -1, -1):
            found = self.search_layer(q, eps, self.efc, li)
            chosen = [(d, r) for d, r in found if r != p][: self.n]
            for d, r in chosen:
                self.connect(li, p, r, d)
                self.connect(li, r, p, d)
            eps = found
        if level > self.entry_level:
            self.entry, self.entry_level = p, level


def _best_first(X: np.ndarray, q: np.ndarray, eps, ef: int, neighbors, visited: np.ndarray):
    """Best-first search keeping the ``ef`` closest ``(distance, position)`` pairs."""
    for _, p in eps:
        visited[p] = True
    cand = list(eps)
    heapq.heapify(cand)
    res = [(-d, -p) for d, p in eps]
    heapq.heapify(res)
    while len(res) > ef:
        heapq.heappop(res)
    while cand:
        d, p = heapq.heappop(cand)
        if len(res) >= ef and (d, p) > (-res[0][0], -res[0][1]):
            break
        nb = neighbors(p)
        if not len(nb):
            continue
        nb = nb[~visited[nb]]
        if not len(nb):
            continue
        visited[nb] = True
        diff = X[nb] - q
        dn = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        if len(res) >= ef:
            keep = dn <= -res[0][0]
            nb, dn = nb[keep], dn[keep]
        for dd, qq in zip(dn.tolist(), nb.tolist()):
            if len(res) < ef or (dd, qq) < (-res[0][0], -res[0][1]):
                heapq.heappush(cand, (dd, qq))
                heapq.heappush(res, (-dd, -qq))
                if len(res) > ef:
                    heapq.heappop(res)
    return sorted((-d, -p) for d, p in res)


def assign_levels(count: int, n: int, seed: int) -> np.ndarray:
    m_l = 1.0 / np.log(n)
    rng = np.random.default_rng(seed)
    u = 1.0 - rng.random(count)  # (0, 1]
    return np.floor(-np.log(u) * m_l).astype(np.int64)


def build_index(embeddings: EmbeddingTable, n: int = 64, ef_construction: int = 200, seed: int = 0) -> LayeredGraphIndex:
    if n < 2:
        raise ConfigError("n must be at least 2")
    if ef_construction < 1:
        raise ConfigError("ef_construction must be positive")
    if len(embeddings) == 0:
        raise ConfigError("cannot build an index over an empty embedding table")
    order = np.argsort(embeddings.ids, kind="stable")
    ids = embeddings.ids[order]
    vectors = embeddings.vectors[order]
    levels = assign_levels(len(ids), n, seed)
    # insertion order is a seeded permutation, independent of id order
    perm = np.random.default_rng(np.random.SeedSequence([seed, 1])).permutation(len(ids))
    builder = _Builder(vectors.astype(np.float64), n, ef_construction)
    for p in perm:
        builder.insert(int(p), int(levels[p]))

    layers: List[Dict[int, EdgeList]] = []
    for li in range(len(builder.nbr)):
        layer = {}
        for p in sorted(builder.members[li]):
            k = int(builder.deg[li][p])
            nbr = builder.nbr[li][p, :k].copy()
            raw = builder.dst[li][p, :k].copy()
            layer[p] = EdgeList(nbr, raw, np.zeros(k), raw.copy())
        layers.append(layer)
    return LayeredGraphIndex(ids, vectors, levels, layers, builder.entry, n, ef_construction, seed)


# -------------------------------------------------------------------- search


def _search_layer(index: LayeredGraphIndex, q: np.ndarray, eps, ef: int, layer: int):
    adj = index.layers[layer]
    visited = np.zeros(len(index), dtype=bool)
    return _best_first(index._X, q, eps, ef, lambda p: adj[p].nbr, visited)


def knn_search(index: LayeredGraphIndex, query, k: int, ef_search: int) -> List[Tuple[int, float]]:
    """Greedy descent through the upper layers, then an ``ef_search``-wide search at layer 0."""
    if len(index) == 0 or k <= 0:
        return []
    if ef_search < k:
        raise ConfigError("ef_search must be at least k")
    q = np.asarray(query, dtype=np.float64)
    diff = index._X[index.entry] - q
    eps = [(float(np.sqrt(diff @ diff)), index.entry)]
    for li in range(index.max_layer, 0, -1):
        eps = _search_layer(index, q, eps, 1, li)[:1]
    found = _search_layer(index, q, eps, ef_search, 0)
    return [(int(index.ids[p]), d) for d, p in found[:k]]


def brute_force_knn(table: EmbeddingTable, query, k: int) -> List[Tuple[int, float]]:
    X = table.vectors.astype(np.float64)
    d = np.sqrt(((X - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1))
    order = np.lexsort((table.ids, d))[:k]
    return [(int(table.ids[i]), float(d[i])) for i in order]


# --------------------------------------------------------------- persistence

_HEADER = struct.Struct("<IQIIIqIQBddI")


def _serialize(index: LayeredGraphIndex) -> bytes:
    prov = index.provenance
    parts = [
        INDEX_MAGIC,
        _HEADER.pack(
            INDEX_VERSION,
            len(index),
            index.vectors.shape[1],
            index.n,
            index.ef_construction,
            index.seed,
            index.max_layer,
            index.entry,
            1 if prov.get("reweighted") else 0,
            float(prov.get("alpha", 0.0)),
            float(prov.get("m_cap", 0.0)),
            int(prov.get("n_prime", 0)),
        ),
        index.ids.astype("<u8").tobytes(),
        index.levels.astype("<u4").tobytes(),
        np.ascontiguousarray(index.vectors, dtype="<f4").tobytes(),
    ]
    rec = np.dtype([("id", "<u8"), ("raw", "<f8"), ("var", "<f8"), ("weighted", "<f8")])
    for layer in index.layers:
        parts.append(struct.pack("<Q", len(layer)))
        for p in sorted(layer):
            e = layer[p]
            parts.append(struct.pack("<QI", p, len(e)))
            arr = np.empty(len(e), dtype=rec)
            arr["id"] = index.ids[e.nbr]
            arr["raw"], arr["var"], arr["weighted"] = e.raw, e.var, e.weighted
            parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_index(index: LayeredGraphIndex, path) -> None:
    Path(path).write_bytes(_serialize(index))


def load_index(path) -> LayeredGraphIndex:
    data = Path(path).read_bytes()
    if len(data) < 4 + _HEADER.size + 4 or data[:4] != INDEX_MAGIC:
        raise CorruptionError("not an index file or truncated header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("index checksum mismatch")
    (version, count, dim, n, efc, seed, max_layer, entry, reweighted, alpha, m_cap, n_prime) = \
        _HEADER.unpack_from(body, 4)
    if version != INDEX_VERSION:
        raise CorruptionError(f"unsupported index version {version}")
    off = 4 + _HEADER.size
    try:
        ids = np.frombuffer(body, "<u8", count, off).astype(np.int64)
        off += 8 * count
        levels = np.frombuffer(body, "<u4", count, off).astype(np.int64)
        off += 4 * count
        vectors = np.frombuffer(body, "<f4", count * dim, off).reshape(count, dim).astype(np.float32)
        off += 4 * count * dim
        pos = {int(i): p for p, i in enumerate(ids)}
        rec = np.dtype([("id", "<u8"), ("raw", "<f8"), ("var", "<f8"), ("weighted", "<f8")])
        layers = []
        for _ in range(max_layer + 1):
            (nodes,) = struct.unpack_from("<Q", body, off)
            off += 8
            layer = {}
            for _ in range(nodes):
                p, deg = struct.unpack_from("<QI", body, off)
                off += 12
                arr = np.frombuffer(body, rec, deg, off)
                off += rec.itemsize * deg
                nbr = np.array([pos[int(i)] for i in arr["id"]], dtype=np.int64)
                layer[int(p)] = EdgeList(nbr, arr["raw"].astype(np.float64), arr["var"].astype(np.float64),
                                         arr["weighted"].astype(np.float64))
            layers.append(layer)
    except (ValueError, struct.error, KeyError) as exc:
        raise CorruptionError(f"malformed index body: {exc}") from None
    if off != len(body):
        raise CorruptionError("trailing bytes in index file")
    provenance: Dict[str, float] = {}
    if reweighted:
        provenance = {"reweighted": True, "alpha": alpha, "m_cap": m_cap, "n_prime": n_prime}
    elif n_prime:
        provenance = {"n_prime": n_prime}
    return LayeredGraphIndex(ids, vectors, levels, layers, int(entry), n, efc, seed, provenance)
