"""Ablation runs over the three index/retrieval switches, plus the variance-by-popularity probe.

Group A: raw-distance pruned index, beta = 0.
Group B: raw-distance pruned index, beta > 0.
Group C: variance-weighted pruned index, beta > 0.

Every group of one seed shares the split, the item embeddings and the built
graph; only the pruning distance and the fusion weight change.
"""

from __future__ import annotations

import hashlib
import logging
import math
import statistics
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from ..core import EmbeddingTable, InteractionLog, UserFeatures, split_leave_one_out, truth_digest
from ..hnsw import LayeredGraphIndex, build_index
from ..retrieval import RetrievalConfig, retrieve_topk
from ..uncertainty import CountBasedHead, estimate_batch
from ..un_index import ReweightConfig, prune_neighbors, reweight_edges
from .metrics import MetricReport, evaluate
from .synthetic import SyntheticData, SyntheticSpec, generate_synthetic

logger = logging.getLogger(__name__)

GROUPS = ("A", "B", "C")
BETA_GRID = (0.0, 0.5, 1.0, 2.0)


class EmbeddingScorer:
    """Scores straight from an embedding table, with no trained network.

    Vectors are L2-normalised; a user is the normalised mean of their recent
    history. Logits are ``temperature`` times the cosine, so they stay in
    ``[-temperature, temperature]``.
    """

    def __init__(self, table: EmbeddingTable, temperature: float = 10.0, history_len: int = 20) -> None:
        self.table = table
        self.temperature = float(temperature)
        self.history_len = int(history_len)
        vec = table.vectors.astype(np.float64)
        norm = np.linalg.norm(vec, axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        self.unit = vec / norm

    def rows(self, items) -> np.ndarray:
        return np.fromiter((self.table.row(int(i)) for i in np.atleast_1d(items)), dtype=np.int64)

    def user_vector(self, user: UserFeatures) -> np.ndarray:
        if not user.history:
            return np.zeros(self.unit.shape[1])
        u = self.unit[self.rows(user.history[-self.history_len:])].mean(axis=0)
        n = np.linalg.norm(u)
        return u / n if n > 0 else u

    def score_u2i_batch(self, user: UserFeatures, items):
        e = self.unit[self.rows(items)]
        return self.temperature * (e @ self.user_vector(user)), e

    def score_i2i_batch(self, a_items, b_items):
        ea, eb = self.unit[self.rows(a_items)], self.unit[self.rows(b_items)]
        return self.temperature * np.einsum("ij,ij->i", ea, eb), np.concatenate([ea, eb], axis=1)


def count_heads(train_log: InteractionLog, base_variance: float = 1.0) -> Tuple[CountBasedHead, CountBasedHead]:
    """(u2i, i2i) count-based heads from the training split."""
    items = train_log.item_counts()
    u2i = CountBasedHead(base_variance, counts=items, source_counts=train_log.user_counts())
    i2i = CountBasedHead(base_variance, counts=items)
    return u2i, i2i


def split_hash(train_log: InteractionLog, truth: Mapping[int, set]) -> str:
    return hashlib.sha256(f"{train_log.digest()}:{truth_digest(truth)}".encode()).hexdigest()[:16]


def noisy_spec(seed: int) -> SyntheticSpec:
    """The synthetic setting used for the index and retrieval ablations.

    The corpus is several beam widths large so the graph matters, and the
    embedding noise is strong enough that tail items' neighborhoods are unreliable.
    """
    return SyntheticSpec(num_users=1500, num_items=2000, num_categories=40, zipf_exponent=1.0,
                         num_clusters=20, cluster_separation=2.0, mean_history=15.0, min_history=3,
                         dim=16, noise_scale=3.0, seed=seed)


@dataclass(frozen=True)
class AblationConfig:
    seeds: Tuple[int, ...] = tuple(range(20))
    validation_seed: int = 1000
    beta: float = 1.0
    beta_grid: Tuple[float, ...] = BETA_GRID
    alpha_grid: Tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)
    m_cap: float = 2.0
    n: int = 64
    n_prime: int = 32
    ef_construction: int = 200
    k: int = 100
    ef_c: Optional[int] = None
    steps: int = 50
    max_users: Optional[int] = 300
    base_variance: float = 0.1
    temperature: float = 5.0

    def retrieval(self, beta: float) -> RetrievalConfig:
        return RetrievalConfig(beta=beta, k=self.k, ef_c=self.ef_c, steps_per_layer=self.steps)


@dataclass
class AblationRow:
    group: str
    seed: int
    beta: float
    alpha: Optional[float]
    report: MetricReport

    @property
    def recall(self) -> float:
        return self.report.recall_at_n

    @property
    def entropy(self) -> float:
        return self.report.cate_entropy

    @property
    def new_cate(self) -> float:
        return self.report.new_cate_ratio


@dataclass
class AblationResult:
    config: AblationConfig
    alpha: float
    alpha_scores: Dict[float, float]
    rows: List[AblationRow]                         # the 3 x seeds table
    beta_rows: List[AblationRow]                    # beta sweep on the raw-pruned index
    split_hashes: Dict[int, Dict[str, str]] = field(default_factory=dict)

    def group_values(self, group: str, metric: str) -> List[float]:
        return [getattr(r, metric) for r in self.rows if r.group == group]

    def summary(self) -> Dict[str, Dict[str, float]]:
        out = {}
        for g in GROUPS:
            out[g] = {}
            for metric in ("recall", "entropy", "new_cate"):
                vals = self.group_values(g, metric)
                out[g][f"{metric}_mean"] = math.fsum(vals) / len(vals)
                out[g][f"{metric}_median"] = statistics.median(vals)
        return out

    def beta_means(self, metric: str) -> Dict[float, float]:
        out = {}
        for beta in self.config.beta_grid:
            vals = [getattr(r, metric) for r in self.beta_rows if r.beta == beta]
            out[beta] = math.fsum(vals) / len(vals)
        return out

    def wins(self, better: str = "C", worse: str = "B") -> int:
        by_seed = {(r.group, r.seed): r.recall for r in self.rows}
        return sum(by_seed[(better, s)] >= by_seed[(worse, s)] for s in self.config.seeds)

    def table_lines(self) -> List[str]:
        n = self.config.k
        lines = [f"group\tseed\trecall@{n}\tentropy@{n}\tnewcate@{n}"]
        for r in self.rows:
            lines.append(f"{r.group}\t{r.seed}\t{r.recall!r}\t{r.entropy!r}\t{r.new_cate!r}")
        summ = self.summary()
        for stat in ("mean", "median"):
            for g in GROUPS:
                s = summ[g]
                lines.append(f"{g}\t{stat}\t{s['recall_' + stat]!r}\t{s['entropy_' + stat]!r}\t{s['new_cate_' + stat]!r}")
        return lines

    def write_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.table_lines()) + "\n")


# ---------------------------------------------------------------- one split


@dataclass
class Workload:
    """Everything one seed's groups share."""

    train_log: InteractionLog
    truth: Dict[int, set]
    history: Dict[int, List[int]]
    category_of: Dict[int, int]
    model: object
    ue_u2i: object
    ue_i2i: object
    index: LayeredGraphIndex
    users: List[int]

    @property
    def split_hash(self) -> str:
        return split_hash(self.train_log, self.truth)


def prepare_workload(data: SyntheticData, config: AblationConfig, seed: int) -> Workload:
    train_log, truth = split_leave_one_out(data.log)
    history = train_log.item_sequences()
    users = sorted(u for u in truth if u in history)
    if config.max_users is not None:
        users = users[: config.max_users]
    model = EmbeddingScorer(data.observed, temperature=config.temperature)
    ue_u2i, ue_i2i = count_heads(train_log, config.base_variance)
    index = build_index(data.observed, n=config.n, ef_construction=config.ef_construction, seed=seed)
    return Workload(train_log, truth, history, data.category_of(), model, ue_u2i, ue_i2i, index, users)


def retrieve_all(work: Workload, index: LayeredGraphIndex, ue_u2i, rcfg: RetrievalConfig) -> Dict[int, List[int]]:
    out = {}
    for u in work.users:
        feats = UserFeatures(u, work.history[u])
        out[u] = [c.item for c in retrieve_topk(index, work.model, ue_u2i, feats, rcfg)]
    return out


def score_run(work: Workload, retrieved: Mapping[int, Sequence[int]], n: int) -> MetricReport:
    truth = {u: work.truth[u] for u in retrieved}
    return evaluate(retrieved, truth, work.history, work.category_of, n=n)


def raw_pruned(work: Workload, n_prime: int) -> LayeredGraphIndex:
    # weighted distance defaults to the raw distance, so this is plain top-n' pruning
    return prune_neighbors(work.index, n_prime)


def reweighted_pruned(work: Workload, alpha: float, config: AblationConfig) -> LayeredGraphIndex:
    rw = ReweightConfig(alpha=alpha, m_cap=config.m_cap, n_prime=config.n_prime)
    return prune_neighbors(reweight_edges(work.index, work.model, work.ue_i2i, rw), config.n_prime)


def run_groups(work: Workload, config: AblationConfig, alpha: float, seed: int,
               beta_grid: Sequence[float] = ()) -> Tuple[Dict[str, MetricReport], Dict[float, MetricReport]]:
    """Group reports for one seed, plus a beta sweep on the raw-pruned index."""
    plain = raw_pruned(work, config.n_prime)
    weighted = reweighted_pruned(work, alpha, config)
    reports: Dict[str, MetricReport] = {}
    sweep: Dict[float, MetricReport] = {}
    cache: Dict[float, MetricReport] = {}

    def plain_at(beta: float) -> MetricReport:
        if beta not in cache:
            cache[beta] = score_run(work, retrieve_all(work, plain, work.ue_u2i, config.retrieval(beta)), config.k)
        return cache[beta]

    reports["A"] = plain_at(0.0)
    reports["B"] = plain_at(config.beta)
    reports["C"] = score_run(work, retrieve_all(work, weighted, work.ue_u2i, config.retrieval(config.beta)), config.k)
    for beta in beta_grid:
        sweep[beta] = plain_at(beta)
    logger.info("seed %d recall A %.4f B %.4f C %.4f", seed, reports["A"].recall_at_n,
                reports["B"].recall_at_n, reports["C"].recall_at_n)
    return reports, sweep


def select_alpha(work: Workload, config: AblationConfig) -> Tuple[float, Dict[float, float]]:
    """Grid-search alpha by Group C recall on a validation workload; ties go to the smaller alpha."""
    scores = {}
    rcfg = config.retrieval(config.beta)
    for alpha in config.alpha_grid:
        idx = reweighted_pruned(work, alpha, config)
        scores[alpha] = score_run(work, retrieve_all(work, idx, work.ue_u2i, rcfg), config.k).recall_at_n
    best = max(sorted(scores), key=lambda a: scores[a])
    return best, scores


def run_ablation(config: AblationConfig = AblationConfig(),
                 spec_for_seed: Callable[[int], SyntheticSpec] = noisy_spec) -> AblationResult:
    if config.validation_seed in config.seeds:
        raise ValueError("validation seed must be disjoint from the evaluation seeds")
    val = prepare_workload(generate_synthetic(spec_for_seed(config.validation_seed)), config, config.validation_seed)
    alpha, alpha_scores = select_alpha(val, config)
    logger.info("alpha %.3g selected on validation seed %d: %s", alpha, config.validation_seed, alpha_scores)

    rows: List[AblationRow] = []
    beta_rows: List[AblationRow] = []
    hashes: Dict[int, Dict[str, str]] = {}
    for seed in config.seeds:
        work = prepare_workload(generate_synthetic(spec_for_seed(seed)), config, seed)
        reports, sweep = run_groups(work, config, alpha, seed, config.beta_grid)
        hashes[seed] = {g: work.split_hash for g in GROUPS}
        rows.append(AblationRow("A", seed, 0.0, None, reports["A"]))
        rows.append(AblationRow("B", seed, config.beta, None, reports["B"]))
        rows.append(AblationRow("C", seed, config.beta, alpha, reports["C"]))
        for beta, rep in sweep.items():
            beta_rows.append(AblationRow("A" if beta == 0 else "B", seed, beta, None, rep))
    return AblationResult(config, alpha, alpha_scores, rows, beta_rows, hashes)


# ------------------------------------------------------ variance vs popularity


@dataclass
class BucketTrend:
    buckets: List[int]
    sizes: List[int]
    i2i: List[float]
    u2i: List[float]

    @property
    def rho_i2i(self) -> float:
        return float(spearmanr(self.buckets, self.i2i)[0])

    @property
    def rho_u2i(self) -> float:
        return float(spearmanr(self.buckets, self.u2i)[0])


def variance_by_popularity(model, ue_u2i, ue_i2i, train_log: InteractionLog, items: Sequence[int],
                           bucket_width: int = 10, min_items: int = 5, items_per_bucket: int = 100,
                           users_per_bucket: int = 10, seed: int = 0) -> BucketTrend:
    """Mean estimated variance per click-count bucket.

    Bucket ``b`` holds items with ``(b-1)*w < count <= b*w``; zero-count items
    form bucket 0. Up to ``items_per_bucket`` items are sampled per bucket; the
    i2i value averages all ordered pairs inside the sample, the u2i value
    averages over ``users_per_bucket`` sampled users. Buckets with fewer than
    ``min_items`` items are dropped.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xb0c]))
    clicks: Dict[int, int] = {}
    for it in train_log:
        if it.event == "click":
            clicks[it.item] = clicks.get(it.item, 0) + 1
    items = np.asarray(sorted(items), dtype=np.int64)
    counts = np.array([clicks.get(int(i), 0) for i in items])
    bucket_of = np.ceil(counts / bucket_width).astype(np.int64)
    history = train_log.item_sequences()
    users = np.array(sorted(history), dtype=np.int64)
    trend = BucketTrend([], [], [], [])
    for b in np.unique(bucket_of):
        members = items[bucket_of == b]
        if len(members) < min_items:
            continue
        if len(members) > items_per_bucket:
            members = np.sort(rng.choice(members, items_per_bucket, replace=False))
        a = np.repeat(members, len(members))
        c = np.tile(members, len(members))
        keep = a != c
        logits, reprs = model.score_i2i_batch(a[keep], c[keep])
        _, var_i = estimate_batch(ue_i2i, logits, reprs, a[keep], c[keep])
        per_user = []
        for u in rng.choice(users, min(users_per_bucket, len(users)), replace=False):
            feats = UserFeatures(int(u), history[int(u)])
            logits, reprs = model.score_u2i_batch(feats, members)
            _, var_u = estimate_batch(ue_u2i, logits, reprs, np.full(len(members), int(u)), members)
            per_user.append(float(np.mean(var_u)))
        trend.buckets.append(int(b))
        trend.sizes.append(int((bucket_of == b).sum()))
        trend.i2i.append(float(np.mean(var_i)))
        trend.u2i.append(float(np.mean(per_user)))
    return trend
