"""Beam search over the layered index ranked by ``score + beta * variance``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import UserFeatures
from .hnsw import LayeredGraphIndex
from .uncertainty import estimate_batch


@dataclass(frozen=True)
class ScoredCandidate:
    item: int
    score_u2i: float
    var_u2i: float
    fusion: float


@dataclass(frozen=True)
class RetrievalConfig:
    beta: float = 0.0
    k: int = 100
    ef_c: Optional[int] = None
    steps_per_layer: Union[int, Sequence[int]] = 50

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.ef_c is not None and self.ef_c < 1:
            raise ValueError("ef_c must be positive")
        steps = [self.steps_per_layer] if isinstance(self.steps_per_layer, int) else list(self.steps_per_layer)
        if not steps or min(steps) < 1:
            raise ValueError("steps per layer must be positive")

    @property
    def beam(self) -> int:
        return self.ef_c if self.ef_c is not None else max(200, 2 * self.k)

    def steps(self, layer: int) -> int:
        if isinstance(self.steps_per_layer, int):
            return self.steps_per_layer
        seq = list(self.steps_per_layer)
        return seq[min(layer, len(seq) - 1)]


def fusion_score(score, variance, beta: float):
    return score + beta * variance


class _Scorer:
    """Per-query memo of (score, variance, fusion) by index position."""

    def __init__(self, index: LayeredGraphIndex, model, ue, user: UserFeatures, beta: float) -> None:
        self.index, self.model, self.ue, self.user, self.beta = index, model, ue, user, beta
        self.memo: Dict[int, Tuple[float, float, float]] = {}
        self.calls = 0

    def score(self, positions: Iterable[int]) -> None:
        todo = [p for p in positions if p not in self.memo]
        if not todo:
            return
        self.calls += 1
        items = self.index.ids[np.asarray(todo, dtype=np.int64)]
        logits, reprs = self.model.score_u2i_batch(self.user, items)
        scores, var = estimate_batch(self.ue, logits, reprs, np.full(len(items), self.user.user), items)
        fus = fusion_score(scores, var, self.beta)
        for p, s, v, f in zip(todo, scores.tolist(), var.tolist(), fus.tolist()):
            self.memo[p] = (s, v, f)

    def key(self, p: int) -> Tuple[float, int]:
        return (-self.memo[p][2], p)

    def candidate(self, p: int) -> ScoredCandidate:
        s, v, f = self.memo[p]
        return ScoredCandidate(int(self.index.ids[p]), s, v, f)


def _layer_search(scorer: _Scorer, entry: List[int], layer: int, steps: int, ef: int,
                  trace: Optional[list] = None) -> List[int]:
    index = scorer.index
    adj = index.layers[layer]
    for p in entry:
        if p not in adj:
            raise ValueError(f"entry item {int(index.ids[p])} is not present at layer {layer}")
    scorer.score(entry)
    visited = set(entry)
    candidates = set(entry)
    W = sorted(set(entry), key=scorer.key)
    for t in range(steps):
        expanded = sorted(candidates)
        new = set()
        for c in expanded:
            new.update(adj[c].nbr.tolist())
        new -= visited
        visited |= new
        scorer.score(sorted(new))
        W = sorted(set(W) | new, key=scorer.key)[:ef]
        candidates = new.intersection(W)
        if trace is not None:
            trace.append({"layer": layer, "step": t, "expanded": expanded, "offered": sorted(new), "W": list(W)})
        if not candidates:
            break
    return W


def un_layer_search(index: LayeredGraphIndex, model, ue_u2i, user: UserFeatures, entry: Iterable[int],
                    layer: int, steps: int, ef_c: int, beta: float, trace: Optional[list] = None) -> List[ScoredCandidate]:
    """One layer of the fusion-ranked beam search; ``entry`` holds item ids."""
    scorer = _Scorer(index, model, ue_u2i, user, beta)
    positions = []
    for item in entry:
        try:
            positions.append(index.position(item))
        except KeyError:
            raise ValueError(f"entry item {item} is not in the index") from None
    W = _layer_search(scorer, positions, layer, steps, ef_c, trace)
    return [scorer.candidate(p) for p in W]


def retrieve_topk(index: LayeredGraphIndex, model, ue_u2i, user: UserFeatures, config: RetrievalConfig,
                  trace: Optional[list] = None) -> List[ScoredCandidate]:
    """Greedy (beam 1) descent through the upper layers, then a ``config.beam``-wide search at layer 0."""
    if len(index) == 0:
        return []
    scorer = _Scorer(index, model, ue_u2i, user, config.beta)
    ep = [index.entry]
    for layer in range(index.max_layer, 0, -1):
        ep = _layer_search(scorer, ep, layer, config.steps(layer), 1, trace)[:1]
    W = _layer_search(scorer, ep, 0, config.steps(0), config.beam, trace)
    return [scorer.candidate(p) for p in W[: config.k]]


def brute_force_topk(items: Sequence[int], model, ue_u2i, user: UserFeatures, k: int, beta: float) -> List[ScoredCandidate]:
    """Score every item and take the top ``k`` by fusion, ties by item id."""
    items = np.asarray(sorted(items), dtype=np.int64)
    logits, reprs = model.score_u2i_batch(user, items)
    scores, var = estimate_batch(ue_u2i, logits, reprs, np.full(len(items), user.user), items)
    fus = scores + beta * var
    order = np.lexsort((items, -fus))[:k]
    return [ScoredCandidate(int(items[i]), float(scores[i]), float(var[i]), float(fus[i])) for i in order]


def write_retrieval(results: Dict[int, List[ScoredCandidate]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for user in sorted(results):
            for rank, c in enumerate(results[user], start=1):
                fh.write(f"{user}\t{rank}\t{c.item}\t{c.score_u2i!r}\t{c.var_u2i!r}\t{c.fusion!r}\n")


def read_retrieval(path) -> Dict[int, List[ScoredCandidate]]:
    out: Dict[int, List[ScoredCandidate]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            user, rank, item, s, v, f = line.split("\t")
            out.setdefault(int(user), []).append(ScoredCandidate(int(item), float(s), float(v), float(f)))
    return out
