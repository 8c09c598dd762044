"""Command-line pipeline: synth, split, train, swing, build-index, reweight-index, retrieve, evaluate, ablate.

Every subcommand accepts every configuration key as ``--key value`` plus
``--config FILE`` (``key=value`` lines); flags override the file. Each output
file gets a ``<file>.meta.json`` sidecar with the config hash and the split
identity of the data it was derived from.

Exit codes: 0 success, 2 missing input file, 3 config violation,
4 unusable input (format, parse or split-identity errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .config import ConfigViolation, RunConfig, load_config
from .core import (FormatError, InteractionLog, UserFeatures, ValidationError, ingest_interactions, load_embeddings,
                   read_truth, save_embeddings, split_leave_one_out, write_interactions, write_truth)
from .hnsw import ConfigError, CorruptionError, build_index, load_index, save_index
from .retrieval import RetrievalConfig, retrieve_topk, write_retrieval, read_retrieval
from .swing import LeakageError, SwingScoreTable, compute_swing
from .trainer import ModelConfig, TrainingError, load_model, save_model, train
from .un_index import ReweightConfig, connectivity_audit, prune_neighbors, reweight_edges

logger = logging.getLogger("uncertain_ann")

COMMANDS = ("synth", "split", "train", "swing", "build-index", "reweight-index", "retrieve", "evaluate", "ablate")

HELP = {
    "synth": "generate a synthetic log, its leave-one-out split and oracle/observed embeddings",
    "split": "leave-one-out split of an existing interaction log",
    "train": "train the two-tower model with both uncertainty heads",
    "swing": "compute the Swing similarity table from the training split",
    "build-index": "build the layered graph index over model or table embeddings",
    "reweight-index": "fill edge variances, reweight distances and prune neighbor lists",
    "retrieve": "top-k retrieval per user with the fusion-ranked beam search",
    "evaluate": "Recall, CateEntropy and NewCateRatio of a retrieval file",
    "ablate": "run the A/B/C ablation over synthetic seeds",
}


class MissingInput(Exception):
    def __init__(self, path) -> None:
        super().__init__(f"missing input file: {path}")
        self.path = str(path)


class InputMismatch(Exception):
    """Artifacts that must come from the same split do not."""


# ------------------------------------------------------------------ helpers


def _need(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MissingInput(p)
    return p


def _path(cfg: RunConfig, key: str, default_name: str) -> Path:
    value = getattr(cfg, key)
    return Path(value) if value else Path(cfg.data) / default_name


def _meta_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def read_meta(path) -> Dict:
    mp = _meta_path(path)
    if not mp.is_file():
        return {}
    with open(mp, "r", encoding="utf-8") as fh:
        return json.load(fh)


def write_meta(path, stage: str, cfg: RunConfig, **fields) -> None:
    meta = {"stage": stage, "config_hash": cfg.digest(), "seed": cfg.seed}
    meta.update({k: v for k, v in fields.items() if v is not None})
    with open(_meta_path(path), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _split_fields(train_path) -> Dict[str, Optional[str]]:
    meta = read_meta(train_path)
    return {"split_hash": meta.get("split_hash"), "train_digest": meta.get("train_digest")}


def _load_train(cfg: RunConfig) -> (Path, InteractionLog):
    path = _need(_path(cfg, "train", "train.tsv"))
    return path, ingest_interactions(path)


def _model_config(cfg: RunConfig, seed: int) -> ModelConfig:
    return ModelConfig(embedding_dim=cfg.embedding_dim, temperature=cfg.temperature, lambda_i2i=cfg.lambda_i2i,
                       sample_pos=cfg.sample_pos, sample_neg=cfg.sample_neg, u2i_negatives=cfg.u2i_negatives,
                       learning_rate=cfg.learning_rate, batch_size=cfg.batch_size, epochs=cfg.epochs, seed=seed,
                       history_len=cfg.history_len, train_samples=cfg.train_samples, eval_samples=cfg.eval_samples)


def _scorer(cfg: RunConfig):
    """(scorer, trained model or None): --model, else --embeddings, else the default file for ``ue``."""
    from .eval.harness import EmbeddingScorer

    if cfg.model or (not cfg.embeddings and cfg.ue == "model"):
        model = load_model(_need(_path(cfg, "model", "model.umdl")))
        return model, model
    table = load_embeddings(_need(_path(cfg, "embeddings", "observed.emb")))
    return EmbeddingScorer(table, temperature=cfg.temperature, history_len=cfg.history_len), None


def _head(cfg: RunConfig, model, train_log: InteractionLog, kind: str):
    from .eval.harness import count_heads

    if cfg.ue == "none":
        return None
    if cfg.ue == "model":
        if model is None:
            raise ConfigViolation("ue=model needs --model; use ue=count or ue=none with --embeddings")
        return model.ue_u2i if kind == "u2i" else model.ue_i2i
    u2i, i2i = count_heads(train_log, cfg.base_variance)
    return u2i if kind == "u2i" else i2i


# ----------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> None:
    from .eval.harness import split_hash
    from .eval.synthetic import SyntheticSpec, generate_synthetic, write_items

    spec = SyntheticSpec(num_users=cfg.num_users, num_items=cfg.num_items, num_categories=cfg.num_categories,
                         zipf_exponent=cfg.zipf_exponent, num_clusters=cfg.num_clusters,
                         cluster_separation=cfg.cluster_separation, home_weight=cfg.home_weight,
                         mean_history=cfg.mean_history, min_history=cfg.min_history, dim=cfg.dim,
                         noise_scale=cfg.noise_scale, seed=cfg.stage_seed("synth"))
    try:
        data = generate_synthetic(spec)
    except ValueError as exc:
        raise ConfigViolation(str(exc)) from None
    out = Path(cfg.out or cfg.data)
    out.mkdir(parents=True, exist_ok=True)
    train_log, truth = split_leave_one_out(data.log)
    sh = split_hash(train_log, truth)
    fields = {"split_hash": sh, "train_digest": train_log.digest()}
    outputs = {
        "interactions.tsv": lambda p: write_interactions(data.log, p),
        "items.tsv": lambda p: write_items(data, p),
        "train.tsv": lambda p: write_interactions(train_log, p),
        "truth.tsv": lambda p: write_truth(truth, p),
        "observed.emb": lambda p: save_embeddings(data.observed, p),
        "oracle.emb": lambda p: save_embeddings(data.oracle, p),
    }
    for name, writer in outputs.items():
        writer(out / name)
        write_meta(out / name, "synth", cfg, **fields)
    logger.info("synth: %d interactions, %d users, %d items -> %s", len(data.log), len(data.log.users),
                spec.num_items, out)


def cmd_split(cfg: RunConfig) -> None:
    from .eval.harness import split_hash

    src = _need(cfg.interactions or Path(cfg.data) / "interactions.tsv")
    log = ingest_interactions(src)
    train_log, truth = split_leave_one_out(log)
    out = Path(cfg.out or cfg.data)
    out.mkdir(parents=True, exist_ok=True)
    fields = {"split_hash": split_hash(train_log, truth), "train_digest": train_log.digest()}
    write_interactions(train_log, out / "train.tsv")
    write_truth(truth, out / "truth.tsv")
    for name in ("train.tsv", "truth.tsv"):
        write_meta(out / name, "split", cfg, **fields)


def _items_universe(cfg: RunConfig) -> Optional[List[int]]:
    from .eval.synthetic import read_categories

    path = _path(cfg, "items", "items.tsv")
    return sorted(read_categories(path)) if path.is_file() else None


def cmd_swing(cfg: RunConfig) -> None:
    train_path, train_log = _load_train(cfg)
    table = compute_swing(train_log, cfg.alpha_swing, cfg.max_user_degree, seed=cfg.stage_seed("swing"))
    out = Path(cfg.out or Path(cfg.data) / "swing.tsv")
    table.save_tsv(out)
    write_meta(out, "swing", cfg, **_split_fields(train_path), swing_source=table.source_digest)


def cmd_train(cfg: RunConfig) -> None:
    train_path, train_log = _load_train(cfg)
    if cfg.swing:
        table = SwingScoreTable.load_tsv(_need(cfg.swing), source_digest=read_meta(cfg.swing).get("swing_source", ""))
    else:
        table = compute_swing(train_log, cfg.alpha_swing, cfg.max_user_degree, seed=cfg.stage_seed("swing"))
    model = train(train_log, table, _model_config(cfg, cfg.stage_seed("train")), item_ids=_items_universe(cfg))
    out = Path(cfg.out or Path(cfg.data) / "model.umdl")
    save_model(model, out)
    write_meta(out, "train", cfg, **_split_fields(train_path), final_epoch_loss=model.final_epoch_loss)
    logger.info("train: final epoch loss %.6f -> %s", model.final_epoch_loss, out)


def cmd_build_index(cfg: RunConfig) -> None:
    if cfg.model or (not cfg.embeddings and cfg.ue == "model"):
        src = _need(_path(cfg, "model", "model.umdl"))
        table = load_model(src).export_embeddings()
    else:
        src = _need(_path(cfg, "embeddings", "observed.emb"))
        table = load_embeddings(src)
    index = build_index(table, n=cfg.n, ef_construction=cfg.ef_construction, seed=cfg.stage_seed("build-index"))
    out = Path(cfg.out or Path(cfg.data) / "index.uhnw")
    save_index(index, out)
    src_meta = read_meta(src)
    write_meta(out, "build-index", cfg, split_hash=src_meta.get("split_hash"),
               train_digest=src_meta.get("train_digest"))


def cmd_reweight_index(cfg: RunConfig) -> None:
    scorer, model = _scorer(cfg)
    idx_path = _need(_path(cfg, "index", "index.uhnw"))
    train_path, train_log = _load_train(cfg)
    index = load_index(idx_path)
    rw = ReweightConfig(alpha=cfg.alpha, m_cap=cfg.m_cap, n_prime=cfg.n_prime)
    head = _head(cfg, model, train_log, "i2i")
    if head is None:
        raise ConfigViolation("reweight-index needs an item-to-item head (ue=model or ue=count)")
    pruned = prune_neighbors(reweight_edges(index, scorer, head, rw), cfg.n_prime)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        audit = connectivity_audit(pruned)
    for w in caught:
        logger.warning("reweight-index: %s", w.message)
    out = Path(cfg.out or Path(cfg.data) / "index.reweighted.uhnw")
    save_index(pruned, out)
    write_meta(out, "reweight-index", cfg, **_split_fields(train_path), reachable_fraction=audit["reachable_fraction"])


def cmd_retrieve(cfg: RunConfig) -> None:
    scorer, model = _scorer(cfg)
    idx_path = _need(_path(cfg, "index", "index.uhnw"))
    train_path, train_log = _load_train(cfg)
    index = load_index(idx_path)
    head = _head(cfg, model, train_log, "u2i")
    rcfg = RetrievalConfig(beta=cfg.beta, k=cfg.k, ef_c=cfg.ef_c or None, steps_per_layer=cfg.T_c)
    results = {}
    for user, hist in sorted(train_log.item_sequences().items()):
        results[user] = retrieve_topk(index, scorer, head, UserFeatures(user, hist), rcfg)
    out = Path(cfg.out or Path(cfg.data) / "retrieval.tsv")
    write_retrieval(results, out)
    fields = _split_fields(train_path)
    fields["train_digest"] = train_log.digest()
    write_meta(out, "retrieve", cfg, **fields)


def cmd_evaluate(cfg: RunConfig) -> None:
    from .eval.harness import split_hash
    from .eval.metrics import evaluate
    from .eval.synthetic import read_categories

    ret_path = _need(_path(cfg, "retrieval", "retrieval.tsv"))
    truth_path = _need(_path(cfg, "truth", "truth.tsv"))
    train_path, train_log = _load_train(cfg)
    items_path = _need(_path(cfg, "items", "items.tsv"))
    truth = read_truth(truth_path)
    meta = read_meta(ret_path)
    expected = split_hash(train_log, truth)
    if meta.get("train_digest") and meta["train_digest"] != train_log.digest():
        raise InputMismatch(f"{ret_path} was produced from a different training split")
    if meta.get("split_hash") and meta["split_hash"] != expected:
        raise InputMismatch(f"{ret_path} split hash {meta['split_hash']} != {expected} of {train_path} + {truth_path}")
    retrieved = {u: [c.item for c in lst] for u, lst in read_retrieval(ret_path).items()}
    retrieved = {u: lst for u, lst in retrieved.items() if u in truth}
    report = evaluate(retrieved, truth, train_log.item_sequences(), read_categories(items_path), n=cfg.metric_n)
    out = Path(cfg.out or Path(cfg.data) / "report.tsv")
    n = cfg.metric_n
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"users\tskipped\trecall@{n}\tentropy@{n}\tnewcate@{n}\n")
        fh.write(f"{report.users}\t{sum(report.skipped.values())}\t{report.recall_at_n!r}\t"
                 f"{report.cate_entropy!r}\t{report.new_cate_ratio!r}\n")
    write_meta(out, "evaluate", cfg, split_hash=expected, train_digest=train_log.digest())
    print(f"Recall@{n} {report.recall_at_n:.4f}  CateEntropy@{n} {report.cate_entropy:.4f}  "
          f"NewCateRatio@{n} {report.new_cate_ratio:.4f}  users {report.users}  skipped {report.skipped}")


def cmd_ablate(cfg: RunConfig) -> None:
    from .eval.harness import AblationConfig, run_ablation

    root = cfg.stage_seed("ablate")
    seeds = tuple(root + i for i in range(cfg.ablation_seeds))
    val = cfg.validation_seed if cfg.validation_seed not in seeds else root + cfg.ablation_seeds
    acfg = AblationConfig(seeds=seeds, validation_seed=val, beta=cfg.beta if cfg.beta > 0 else 1.0,
                          m_cap=cfg.m_cap, n=cfg.n, n_prime=cfg.n_prime, ef_construction=cfg.ef_construction,
                          k=cfg.k, ef_c=cfg.ef_c or None, steps=cfg.T_c, max_users=cfg.ablation_users,
                          base_variance=cfg.base_variance)
    result = run_ablation(acfg)
    out = Path(cfg.out or Path(cfg.data) / "ablation.tsv")
    out.parent.mkdir(parents=True, exist_ok=True)
    result.write_tsv(out)
    write_meta(out, "ablate", cfg, alpha=result.alpha, wins_c_over_b=result.wins())
    for line in result.table_lines()[-6:]:
        print(line)
    print(f"alpha={result.alpha} (validation seed {val}); C >= B in {result.wins()}/{len(seeds)} seeds")


HANDLERS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "swing": cmd_swing,
    "build-index": cmd_build_index,
    "reweight-index": cmd_reweight_index,
    "retrieve": cmd_retrieve,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


# ------------------------------------------------------------------ parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key=value config file; flags override it")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    defaults = RunConfig()
    for key in RunConfig.keys():
        flag = "--" + key.replace("_", "-")
        common.add_argument(flag, dest=key, default=None, metavar=key.upper(),
                            help=f"config key {key} (default {getattr(defaults, key)!r})")
    parser = argparse.ArgumentParser(prog="uncertain-ann", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: Dict[str, str] = {}
    if args.config:
        values.update(load_config(_need(args.config)))
    for key in RunConfig.keys():
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return RunConfig.from_mapping(values)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        logger.info("resolved config %s: %s", cfg.digest(), json.dumps(cfg.to_dict(), sort_keys=True))
        HANDLERS[args.command](cfg)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigViolation, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except (FormatError, ValidationError, CorruptionError, InputMismatch, LeakageError, TrainingError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
