import math

import numpy as np
import pytest

from oracles import random_metric_fixture, ref_entropy, ref_new_cate, ref_recall
from uncertain_ann.eval.metrics import SkipUser, cate_entropy, evaluate, new_cate_ratio, recall_at_n


def test_hand_examples():
    assert recall_at_n(["a", "b", "c"], {"b", "d"}, 3) == 0.5
    assert recall_at_n([1, 2, 3], {1, 3}, 3) == 1.0
    assert recall_at_n([1, 2], {5}, 2) == 0.0
    assert new_cate_ratio({1, 2, 3}, {1, 2}) == 0.5
    assert new_cate_ratio({1}, {1, 2}) == 0.0
    assert new_cate_ratio({3, 4, 5}, {1}) == 3.0
    cats = {i: 0 for i in range(10)}
    assert cate_entropy(list(range(10)), cats) == 0.0
    four = {i: i // 25 for i in range(100)}
    assert abs(cate_entropy(list(range(100)), four) - 2.0) < 1e-5
    mixed = {i: 0 if i < 60 else (1 if i < 90 else 2) for i in range(100)}
    assert abs(cate_entropy(list(range(100)), mixed) - 1.29546) < 1e-5


def test_recall_cutoff():
    assert recall_at_n([1, 2, 3, 4], {4}, 3) == 0.0


def test_skips():
    with pytest.raises(SkipUser):
        recall_at_n([1], set(), 5)
    with pytest.raises(SkipUser):
        new_cate_ratio({1}, set())
    with pytest.raises(SkipUser):
        cate_entropy([], {})


def test_match_reference_loops_on_random_fixtures():
    rng = np.random.default_rng(2024)
    for _ in range(300):
        category_of, retrieved, truth, history, n = random_metric_fixture(rng)
        assert recall_at_n(retrieved, truth, n) == ref_recall(retrieved, truth, n)
        top = retrieved[:n]
        assert cate_entropy(top, category_of) == ref_entropy(top, category_of)
        rc = [category_of[i] for i in top]
        hc = [category_of[i] for i in history]
        assert new_cate_ratio(set(rc), set(hc)) == ref_new_cate(rc, hc)


def test_entropy_bounded_by_observed_categories(rng):
    for _ in range(200):
        cats = {i: int(rng.integers(0, 6)) for i in range(30)}
        items = [int(i) for i in rng.choice(30, 15, replace=False)]
        assert 0.0 <= cate_entropy(items, cats) <= math.log2(len({cats[i] for i in items})) + 1e-12


def test_evaluate_means_and_skips():
    category_of = {1: 0, 2: 1, 3: 1, 4: 2}
    retrieved = {10: [1, 2], 11: [3, 4], 12: [4]}
    truth = {10: {2}, 11: {1}}
    history = {10: [1], 11: [2, 3], 12: []}
    rep = evaluate(retrieved, truth, history, category_of, n=2)
    assert rep.users == 3
    assert rep.skipped == {"recall": 1, "entropy": 0, "new_cate": 1}
    assert rep.recall_at_n == 0.5
    assert rep.new_cate_ratio == (1 / 1 + 1 / 1) / 2
    assert rep.cate_entropy == (1.0 + 1.0 + 0.0) / 3
    assert rep.per_user[12] == {"entropy": 0.0}
