"""Relevance and novelty metrics over retrieved lists."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Sequence


class SkipUser(ValueError):
    """The user has nothing to measure against and is left out of the mean."""


def recall_at_n(retrieved: Sequence[int], truth: Iterable[int], n: int) -> float:
    truth = set(truth)
    if not truth:
        raise SkipUser("empty ground truth")
    return len(set(list(retrieved)[:n]) & truth) / len(truth)


def new_cate_ratio(retrieved_cates: Iterable[int], history_cates: Iterable[int]) -> float:
    """New categories in the result divided by the number of history categories.

    The denominator is the history size, so values above 1 are possible.
    """
    history = set(history_cates)
    if not history:
        raise SkipUser("empty history")
    return len(set(retrieved_cates) - history) / len(history)


def cate_entropy(retrieved_items: Sequence[int], category_of: Mapping[int, int]) -> float:
    if not len(retrieved_items):
        raise SkipUser("empty result list")
    counts = Counter(category_of[i] for i in retrieved_items)
    total = len(retrieved_items)
    return -math.fsum((c / total) * math.log2(c / total) for c in counts.values())


@dataclass
class MetricReport:
    n: int
    recall_at_n: float
    cate_entropy: float
    new_cate_ratio: float
    users: int
    skipped: Dict[str, int] = field(default_factory=dict)
    per_user: Dict[int, Dict[str, float]] = field(default_factory=dict)


def _mean(values: List[float]) -> float:
    return math.fsum(values) / len(values) if values else float("nan")


def evaluate(retrieved: Mapping[int, Sequence[int]], truth: Mapping[int, Iterable[int]],
             history: Mapping[int, Sequence[int]], category_of: Mapping[int, int], n: int = 100) -> MetricReport:
    """Per-user metrics on the top ``n`` of each list, averaged over users that can be scored."""
    skipped = {"recall": 0, "entropy": 0, "new_cate": 0}
    rec, ent, new = [], [], []
    per_user: Dict[int, Dict[str, float]] = {}
    for user in sorted(retrieved):
        top = list(retrieved[user])[:n]
        row: Dict[str, float] = {}
        try:
            row["recall"] = recall_at_n(top, truth.get(user, ()), n)
            rec.append(row["recall"])
        except SkipUser:
            skipped["recall"] += 1
        try:
            row["entropy"] = cate_entropy(top, category_of)
            ent.append(row["entropy"])
        except SkipUser:
            skipped["entropy"] += 1
        try:
            row["new_cate"] = new_cate_ratio({category_of[i] for i in top},
                                             {category_of[i] for i in history.get(user, ())})
            new.append(row["new_cate"])
        except SkipUser:
            skipped["new_cate"] += 1
        per_user[user] = row
    return MetricReport(n, _mean(rec), _mean(ent), _mean(new), len(per_user), skipped, per_user)
