import numpy as np
import pytest
from scipy.stats import chisquare

from uncertain_ann.eval.synthetic import SyntheticSpec, generate_synthetic, read_categories, write_items


def test_deterministic():
    a, b = generate_synthetic(SyntheticSpec(seed=4)), generate_synthetic(SyntheticSpec(seed=4))
    assert a.log == b.log
    assert a.observed == b.observed and a.oracle == b.oracle
    assert generate_synthetic(SyntheticSpec(seed=5)).log != a.log


def test_infeasible_spec():
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(num_items=0))
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(num_users=0))


def test_popularity_is_seeded_zipf():
    spec = SyntheticSpec(num_items=50, zipf_exponent=1.3, seed=2)
    data = generate_synthetic(spec)
    expected = np.arange(1, 51, dtype=float) ** -1.3
    assert np.array_equal(np.sort(data.popularity), np.sort(expected))
    assert np.array_equal(generate_synthetic(spec).popularity, data.popularity)


def test_uniform_counts_without_zipf():
    data = generate_synthetic(SyntheticSpec(zipf_exponent=0.0, seed=11))
    counts = data.counts
    assert chisquare(counts).pvalue > 0.01


def test_head_items_are_less_noisy():
    data = generate_synthetic(SyntheticSpec())
    order = np.argsort(-data.counts, kind="stable")
    tenth = len(order) // 10
    top, bottom = data.noise[order[:tenth]].mean(), data.noise[order[-tenth:]].mean()
    assert top / bottom < 0.5


def test_noise_law_and_counts_consistent():
    data = generate_synthetic(SyntheticSpec(seed=3))
    assert np.array_equal(data.noise, data.spec.noise_scale / np.sqrt(1.0 + data.counts))
    from_log = np.bincount([it.item for it in data.log], minlength=data.spec.num_items)
    assert np.array_equal(from_log, data.counts)


def test_users_favor_home_cluster():
    data = generate_synthetic(SyntheticSpec(seed=1))
    home = np.mean([data.item_cluster[it.item] == it.user % data.spec.num_clusters for it in data.log])
    assert home > 0.6


def test_item_file_round_trip(tmp_path):
    data = generate_synthetic(SyntheticSpec(num_items=30, num_users=20))
    write_items(data, tmp_path / "items.tsv")
    assert read_categories(tmp_path / "items.tsv") == data.category_of()
