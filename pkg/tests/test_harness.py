import numpy as np
import pytest

from uncertain_ann.core import UserFeatures
from uncertain_ann.eval.harness import (AblationConfig, EmbeddingScorer, count_heads, prepare_workload, raw_pruned,
                                        retrieve_all, run_ablation, run_groups, score_run, split_hash,
                                        variance_by_popularity)
from uncertain_ann.eval.synthetic import SyntheticSpec, generate_synthetic
from uncertain_ann.retrieval import RetrievalConfig, retrieve_topk


def small_spec(seed):
    return SyntheticSpec(num_users=120, num_items=200, num_categories=10, num_clusters=4, noise_scale=2.0, seed=seed)


SMALL = AblationConfig(seeds=tuple(range(20)), validation_seed=99, alpha_grid=(0.5, 2.0), n=8, n_prime=4,
                       ef_construction=40, k=20, steps=20, max_users=20)


@pytest.fixture(scope="module")
def small_result():
    return run_ablation(SMALL, spec_for_seed=small_spec)


def test_embedding_scorer_bounds(rng):
    data = generate_synthetic(small_spec(0))
    scorer = EmbeddingScorer(data.observed, temperature=5.0)
    logits, reprs = scorer.score_u2i_batch(UserFeatures(0, [1, 2, 3]), range(200))
    assert np.all(np.abs(logits) <= 5.0 + 1e-12)
    a, _ = scorer.score_i2i_batch([4, 7], [7, 4])
    assert a[0] == a[1]
    assert scorer.score_i2i_batch([3], [3])[0][0] == pytest.approx(5.0)


def test_count_heads_use_train_counts():
    data = generate_synthetic(small_spec(1))
    u2i, i2i = count_heads(data.log, 0.5)
    item, c = next(iter(data.log.item_counts().items()))
    user, cu = next(iter(data.log.user_counts().items()))
    assert i2i.entity_variance(item) == 0.5 / (1 + c)
    assert u2i.entity_variance(user, source=True) == 0.5 / (1 + cu)


def test_group_a_is_plain_retrieval():
    work = prepare_workload(generate_synthetic(small_spec(3)), SMALL, 3)
    reports, _ = run_groups(work, SMALL, 1.0, 3)
    plain = raw_pruned(work, SMALL.n_prime)
    headless = {}
    for u in work.users:
        cfg = RetrievalConfig(beta=0.0, k=SMALL.k, steps_per_layer=SMALL.steps)
        headless[u] = [c.item for c in retrieve_topk(plain, work.model, None, UserFeatures(u, work.history[u]), cfg)]
    assert score_run(work, headless, SMALL.k) == reports["A"]
    assert retrieve_all(work, plain, work.ue_u2i, SMALL.retrieval(0.0)) == headless


def test_rows_summary_and_split_identity(small_result, tmp_path):
    res = small_result
    assert len(res.rows) == 60
    assert sorted({(r.group, r.seed) for r in res.rows}) == sorted((g, s) for g in "ABC" for s in range(20))
    assert len(res.beta_rows) == 20 * len(SMALL.beta_grid)
    lines = res.table_lines()
    assert lines[0] == "group\tseed\trecall@20\tentropy@20\tnewcate@20"
    assert len(lines) == 1 + 60 + 6
    assert [ln.split("\t")[1] for ln in lines[-6:]] == ["mean"] * 3 + ["median"] * 3
    for seed, hashes in res.split_hashes.items():
        assert len(set(hashes.values())) == 1
    data = generate_synthetic(small_spec(5))
    work = prepare_workload(data, SMALL, 5)
    assert res.split_hashes[5]["A"] == split_hash(work.train_log, work.truth)
    assert res.alpha in SMALL.alpha_grid
    assert 0 <= res.wins() <= 20
    res.write_tsv(tmp_path / "ab.tsv")
    assert (tmp_path / "ab.tsv").read_text().splitlines() == lines


def test_ablation_reproducible(small_result):
    again = run_ablation(SMALL, spec_for_seed=small_spec)
    assert again.table_lines() == small_result.table_lines()
    assert again.alpha_scores == small_result.alpha_scores


def test_validation_seed_must_be_disjoint():
    with pytest.raises(ValueError):
        run_ablation(AblationConfig(seeds=(1, 2), validation_seed=2), spec_for_seed=small_spec)


def test_count_head_variance_falls_with_popularity():
    data = generate_synthetic(SyntheticSpec(seed=0))
    u2i, i2i = count_heads(data.log, 1.0)
    scorer = EmbeddingScorer(data.observed)
    trend = variance_by_popularity(scorer, u2i, i2i, data.log, range(data.spec.num_items))
    assert len(trend.buckets) >= 5
    assert trend.rho_i2i <= -0.8 and trend.rho_u2i <= -0.8
    assert all(s >= 5 for s in trend.sizes)
