"""Swing item-to-item similarity from click co-occurrence."""

from __future__ import annotations

import math
from collections import defaultdict
from itertools import combinations, repeat
from typing import Dict, List, Mapping, Tuple

import numpy as np

from .core import InteractionLog


class SwingScoreTable:
    """Symmetric similarity map stored under ``(min(a, b), max(a, b))`` keys."""

    def __init__(self, entries: Mapping[Tuple[int, int], float], source_digest: str = "") -> None:
        self.entries: Dict[Tuple[int, int], float] = {}
        for (a, b), s in entries.items():
            if a == b or s <= 0:
                continue
            self.entries[(min(a, b), max(a, b))] = float(s)
        self.source_digest = source_digest
        self._partners: Dict[int, Dict[int, float]] = defaultdict(dict)
        for (a, b), s in self.entries.items():
            self._partners[a][b] = s
            self._partners[b][a] = s

    def __len__(self) -> int:
        return len(self.entries)

    def sim(self, a: int, b: int) -> float:
        return self.entries.get((min(a, b), max(a, b)), 0.0)

    def partners(self, item: int) -> Dict[int, float]:
        return dict(self._partners.get(item, {}))

    def save_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for (a, b) in sorted(self.entries):
                fh.write(f"{a}\t{b}\t{self.entries[(a, b)]!r}\n")

    @classmethod
    def load_tsv(cls, path, source_digest: str = "") -> "SwingScoreTable":
        entries = {}
        with open(path, "r", encoding="utf-8") as fh:
            for raw in fh:
                line = raw.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                a, b, s = line.split("\t")
                entries[(int(a), int(b))] = float(s)
        return cls(entries, source_digest=source_digest)


def _user_item_sets(log: InteractionLog, max_user_degree: int, seed: int) -> Dict[int, frozenset]:
    rng = np.random.default_rng(seed)
    sets: Dict[int, set] = defaultdict(set)
    for it in log:
        if it.event == "click":
            sets[it.user].add(it.item)
    out = {}
    for user in sorted(sets):
        items = sorted(sets[user])
        if len(items) > max_user_degree:
            keep = rng.choice(len(items), size=max_user_degree, replace=False)
            items = [items[k] for k in sorted(keep)]
        out[user] = frozenset(items)
    return out


def compute_swing(log: InteractionLog, alpha_swing: float = 1.0, max_user_degree: int = 100,
                  seed: int = 0) -> SwingScoreTable:
    """Swing similarity over ordered user pairs.

    ``sim(i, j) = sum over ordered pairs (u, v), u != v, who both clicked i and j of
    1 / (alpha_swing + |I_u & I_v|)``. Per-pair sums use :func:`math.fsum` so the
    result does not depend on accumulation order.
    """
    if alpha_swing <= 0:
        raise ValueError("alpha_swing must be positive")
    if max_user_degree < 1:
        raise ValueError("max_user_degree must be positive")
    item_sets = _user_item_sets(log, max_user_degree, seed)

    item_users: Dict[int, List[int]] = defaultdict(list)
    for user, items in item_sets.items():
        for i in items:
            item_users[i].append(user)

    # candidate user pairs: those sharing at least one item
    pair_overlap: Dict[Tuple[int, int], int] = defaultdict(int)
    for users in item_users.values():
        for u, v in combinations(sorted(users), 2):
            pair_overlap[(u, v)] += 1

    # (i, j) -> {overlap size: number of ordered user pairs}
    tallies: Dict[Tuple[int, int], Dict[int, int]] = defaultdict(lambda: defaultdict(int))
    for (u, v), k in pair_overlap.items():
        if k < 2:
            continue
        common = sorted(item_sets[u] & item_sets[v])
        for i, j in combinations(common, 2):
            tallies[(i, j)][k] += 2

    entries = {}
    for pair, by_k in tallies.items():
        terms = []
        for k in sorted(by_k):
            terms.append(repeat(1.0 / (alpha_swing + k), by_k[k]))
        entries[pair] = math.fsum(t for chunk in terms for t in chunk)
    return SwingScoreTable(entries, source_digest=log.digest())


def top_positives(table: SwingScoreTable, item: int, k: int) -> List[int]:
    if k <= 0:
        return []
    partners = table.partners(item)
    ranked = sorted(((s, b) for b, s in partners.items() if s > 0), key=lambda t: (-t[0], t[1]))
    return [b for _, b in ranked[:k]]


def check_leakage(table: SwingScoreTable, train_log: InteractionLog) -> None:
    """Refuse a Swing table that was not computed from ``train_log``."""
    if table.source_digest != train_log.digest():
        raise LeakageError(
            "swing table was computed from a different log than the training split "
            f"({table.source_digest or 'unknown'} != {train_log.digest()})"
        )


class LeakageError(RuntimeError):
    pass
