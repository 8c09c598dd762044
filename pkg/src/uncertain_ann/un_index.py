"""Variance-weighted edge distances and neighbor pruning on a built graph index."""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .hnsw import ConfigError, EdgeList, LayeredGraphIndex
from .uncertainty import estimate_batch


@dataclass(frozen=True)
class ReweightConfig:
    alpha: float = 1.0
    m_cap: float = 2.0
    n_prime: int = 32

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ConfigError("alpha must be > 0")
        if not self.m_cap > 1:
            raise ConfigError("m_cap must be > 1")
        if self.n_prime < 1:
            raise ConfigError("n_prime must be positive")


def weighted_distance(raw, variance, alpha: float, m_cap: float):
    """``raw * min(m_cap, 1 + alpha * variance)``."""
    return np.asarray(raw, dtype=np.float64) * np.minimum(m_cap, 1.0 + alpha * np.asarray(variance, dtype=np.float64))


def reweight_edges(index: LayeredGraphIndex, model, ue, config: ReweightConfig) -> LayeredGraphIndex:
    """Copy of ``index`` with every edge's variance and weighted distance filled in.

    ``model`` provides ``score_i2i_batch(a_items, b_items) -> (logits, reprs)``;
    ``ue`` is any head with ``estimate_batch``.
    """
    out = index.copy()
    for li, p, edges in out.iter_edges():
        if not len(edges):
            continue
        src = int(out.ids[p])
        dst = out.ids[edges.nbr]
        a = np.full(len(dst), src, dtype=np.int64)
        try:
            logits, reprs = model.score_i2i_batch(a, dst)
        except KeyError as exc:
            raise KeyError(f"cannot score edge from item {src}: {exc.args[0]}") from None
        _, var = estimate_batch(ue, logits, reprs, a, dst)
        edges.var = np.asarray(var, dtype=np.float64)
        edges.weighted = weighted_distance(edges.raw, edges.var, config.alpha, config.m_cap)
    out.provenance = {"reweighted": True, "alpha": float(config.alpha), "m_cap": float(config.m_cap), "n_prime": 0}
    return out


def prune_neighbors(index: LayeredGraphIndex, n_prime: int) -> LayeredGraphIndex:
    """Keep the ``n_prime`` smallest weighted distances per list, ties by item id."""
    if n_prime < 1:
        raise ConfigError("n_prime must be positive")
    if n_prime >= index.n:
        warnings.warn(f"n_prime={n_prime} is not below the build budget n={index.n}", stacklevel=2)
    out = index.copy()
    for li, p, edges in out.iter_edges():
        if len(edges) <= n_prime:
            continue
        # positions are in id order, so lexsort on (weighted, position) applies the id tie rule
        order = np.lexsort((edges.nbr, edges.weighted))[:n_prime]
        out.layers[li][p] = EdgeList(edges.nbr[order], edges.raw[order], edges.var[order], edges.weighted[order])
    prov = dict(out.provenance)
    prov["n_prime"] = int(n_prime)
    out.provenance = prov
    return out


def reachable_fraction(index: LayeredGraphIndex, layer: int = 0) -> float:
    """Fraction of the layer's nodes reachable from the entry point by directed edges."""
    adj = index.layers[layer]
    if not adj:
        return 1.0
    start = index.entry
    seen = {start}
    queue = deque([start])
    while queue:
        p = queue.popleft()
        for q in adj[p].nbr.tolist():
            if q not in seen:
                seen.add(q)
                queue.append(q)
    return len(seen) / len(adj)


def connectivity_audit(index: LayeredGraphIndex, threshold: float = 0.99) -> Dict[str, float]:
    frac = reachable_fraction(index, 0)
    report = {"reachable_fraction": frac, "threshold": threshold, "ok": frac >= threshold}
    if not report["ok"]:
        warnings.warn(f"only {frac:.2%} of layer-0 items reachable from the entry point", stacklevel=2)
    return report
