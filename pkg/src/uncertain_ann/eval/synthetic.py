"""Clustered synthetic interaction data with Zipf item popularity.

Items belong to latent clusters; each user prefers one home cluster. A user's
items are drawn without replacement with probability proportional to
``affinity[user, cluster(item)] * popularity(item)``. The generator also emits
noise-free "oracle" item embeddings and "observed" embeddings whose noise scale
is ``noise_scale / sqrt(1 + count)``, so rarely seen items are the least reliable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from ..core import EVENTS, EmbeddingTable, Interaction, InteractionLog

EVENT_PROBS = (0.85, 0.03, 0.07, 0.05)


@dataclass(frozen=True)
class SyntheticSpec:
    num_users: int = 600
    num_items: int = 400
    num_categories: int = 24
    zipf_exponent: float = 1.0
    num_clusters: int = 8
    cluster_separation: float = 3.0
    home_weight: float = 0.8
    mean_history: float = 15.0
    min_history: int = 3
    dim: int = 16
    noise_scale: float = 1.0
    seed: int = 0


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    log: InteractionLog
    affinity: np.ndarray          # (users, clusters) preference weights
    item_cluster: np.ndarray
    item_category: np.ndarray
    popularity: np.ndarray        # unnormalised Zipf weights
    counts: np.ndarray            # interactions per item in the generated log
    noise: np.ndarray             # per-item noise scale actually applied
    oracle: EmbeddingTable
    observed: EmbeddingTable

    @property
    def preferences(self) -> Dict[int, np.ndarray]:
        return {u: self.affinity[u] for u in range(len(self.affinity))}

    def category_of(self) -> Dict[int, int]:
        return {i: int(c) for i, c in enumerate(self.item_category)}


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    if spec.num_items < 1 or spec.num_users < 1:
        raise ValueError("synthetic spec needs at least one user and one item")
    if spec.num_clusters < 1 or spec.num_categories < 1:
        raise ValueError("need at least one cluster and one category")
    rng = np.random.default_rng(spec.seed)
    I, U, K, d = spec.num_items, spec.num_users, spec.num_clusters, spec.dim

    item_cluster = np.arange(I) % K
    per_cluster = max(1, spec.num_categories // K)
    item_category = (item_cluster * per_cluster + rng.integers(0, per_cluster, I)) % spec.num_categories

    ranks = rng.permutation(I) + 1
    popularity = ranks.astype(np.float64) ** (-spec.zipf_exponent)

    affinity = np.full((U, K), (1.0 - spec.home_weight) / max(K - 1, 1))
    home = np.arange(U) % K
    affinity[np.arange(U), home] = spec.home_weight if K > 1 else 1.0

    lengths = spec.min_history + rng.poisson(max(spec.mean_history - spec.min_history, 0.0), U)
    lengths = np.minimum(lengths, I)

    records = []
    counts = np.zeros(I, dtype=np.int64)
    for u in range(U):
        w = affinity[u, item_cluster] * popularity
        picks = rng.choice(I, size=int(lengths[u]), replace=False, p=w / w.sum())
        times = np.cumsum(rng.integers(1, 3600, size=len(picks))) + 1_000_000
        events = rng.choice(len(EVENTS), size=len(picks), p=EVENT_PROBS)
        for item, ts, ev in zip(picks, times, events):
            records.append(Interaction(u, int(item), int(item_category[item]), int(ts), EVENTS[ev]))
            counts[item] += 1

    centroids = rng.standard_normal((K, d)) * spec.cluster_separation / np.sqrt(d)
    oracle = centroids[item_cluster] + rng.standard_normal((I, d)) / np.sqrt(d)
    noise = spec.noise_scale / np.sqrt(1.0 + counts)
    observed = oracle + noise[:, None] * rng.standard_normal((I, d)) / np.sqrt(d)

    ids = np.arange(I)
    return SyntheticData(
        spec=spec,
        log=InteractionLog(records),
        affinity=affinity,
        item_cluster=item_cluster,
        item_category=item_category,
        popularity=popularity,
        counts=counts,
        noise=noise,
        oracle=EmbeddingTable(ids, oracle),
        observed=EmbeddingTable(ids, observed),
    )


def write_items(data: SyntheticData, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(len(data.item_cluster)):
            fh.write(f"{i}\t{int(data.item_category[i])}\t{int(data.item_cluster[i])}\t{int(data.counts[i])}\n")


def read_categories(path) -> Dict[int, int]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            out[int(parts[0])] = int(parts[1])
    return out
