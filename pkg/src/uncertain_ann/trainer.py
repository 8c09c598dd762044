"""Two-tower model with user-to-item and item-to-item uncertainty heads.

The item tower maps a learned per-item feature vector through ``item_tower_layers``;
the user head scores ``[mean(history embeddings), context, target embedding]``
through ``user_head_layers``. Item-to-item logits are ``temperature * <e_a, e_b>``.
Both pair types feed a :class:`~uncertain_ann.uncertainty.HeteroscedasticHead` and
the joint objective is ``L_u2i + lambda_i2i * L_i2i``.

Backpropagation is written out by hand in numpy so the gradients can be checked
against finite differences.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import EmbeddingTable, FormatError, InteractionLog, UserFeatures
from .swing import SwingScoreTable, check_leakage, top_positives
from .uncertainty import HeteroscedasticHead

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"UMDL"
MODEL_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    embedding_dim: int = 32
    item_tower_layers: Tuple[int, ...] = (64, 48, 32)
    user_head_layers: Tuple[int, ...] = (128, 64, 1)
    temperature: float = 10.0
    lambda_i2i: float = 0.1
    sample_pos: int = 2
    sample_neg: int = 8
    u2i_negatives: int = 4
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 10
    seed: int = 0
    history_len: int = 20
    context_dim: int = 0
    train_samples: int = 8
    eval_samples: int = 64
    feature_init_scale: float = 0.1

    def __post_init__(self) -> None:
        self.item_tower_layers = tuple(int(x) for x in self.item_tower_layers)
        self.user_head_layers = tuple(int(x) for x in self.user_head_layers)
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.lambda_i2i < 0:
            raise ValueError("lambda_i2i must be non-negative")
        if not self.user_head_layers or self.user_head_layers[-1] != 1:
            raise ValueError("last user head layer must have width 1")
        if len(self.user_head_layers) < 2:
            raise ValueError("user head needs at least one hidden layer")
        if min(self.sample_pos, self.sample_neg, self.u2i_negatives, self.batch_size, self.epochs) < 0:
            raise ValueError("sample counts must be non-negative")

    @property
    def output_dim(self) -> int:
        return self.item_tower_layers[-1] if self.item_tower_layers else self.embedding_dim


def _he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


class TrainedModel:
    """Parameters plus forward passes. Also serves as the untrained starting point."""

    def __init__(self, item_ids: Sequence[int], config: ModelConfig, init: str = "he") -> None:
        self.config = config
        self.item_ids = np.asarray(item_ids, dtype=np.int64)
        if len(np.unique(self.item_ids)) != len(self.item_ids):
            raise ValueError("duplicate item ids")
        self._row = {int(i): r for r, i in enumerate(self.item_ids)}
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x1ee7]))
        zero = init == "zero"
        if init not in ("he", "zero"):
            raise ValueError(f"unknown init {init!r}")

        p: Dict[str, np.ndarray] = {}
        n, d = len(self.item_ids), config.embedding_dim
        p["item_features"] = np.zeros((n, d)) if zero else rng.normal(0.0, config.feature_init_scale, (n, d))
        fan_in = d
        for li, width in enumerate(config.item_tower_layers):
            p[f"tower{li}_W"] = np.zeros((fan_in, width)) if zero else _he_uniform(rng, fan_in, width)
            p[f"tower{li}_b"] = np.zeros(width)
            fan_in = width
        e = config.output_dim
        fan_in = 2 * e + config.context_dim
        for li, width in enumerate(config.user_head_layers):
            p[f"head{li}_W"] = np.zeros((fan_in, width)) if zero else _he_uniform(rng, fan_in, width)
            p[f"head{li}_b"] = np.zeros(width)
            fan_in = width
        self.params = p

        hidden = config.user_head_layers[-2]
        head_seed = int(rng.integers(2**31)) if not zero else config.seed
        self.ue_u2i = HeteroscedasticHead(hidden, samples=config.eval_samples, seed=head_seed)
        self.ue_i2i = HeteroscedasticHead(2 * e, samples=config.eval_samples, seed=head_seed + 1)
        self.final_epoch_loss: Optional[float] = None
        self.epoch_losses: List[float] = []
        self._cache: Optional[np.ndarray] = None

    # ------------------------------------------------------------------ params

    def param_names(self) -> List[str]:
        names = list(self.params)
        names += [f"ue_u2i.{k}" for k in HeteroscedasticHead.PARAM_NAMES]
        names += [f"ue_i2i.{k}" for k in HeteroscedasticHead.PARAM_NAMES]
        return names

    def get_param(self, name: str) -> np.ndarray:
        if name.startswith("ue_u2i."):
            return getattr(self.ue_u2i, name[7:])
        if name.startswith("ue_i2i."):
            return getattr(self.ue_i2i, name[7:])
        return self.params[name]

    def set_param(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if name.startswith("ue_u2i."):
            setattr(self.ue_u2i, name[7:], value)
        elif name.startswith("ue_i2i."):
            setattr(self.ue_i2i, name[7:], value)
        else:
            self.params[name] = value
        self._cache = None

    def invalidate(self) -> None:
        self._cache = None

    # ----------------------------------------------------------------- forward

    def row(self, item: int) -> int:
        try:
            return self._row[int(item)]
        except KeyError:
            raise KeyError(f"unknown item {item}") from None

    def rows(self, items) -> np.ndarray:
        return np.fromiter((self.row(i) for i in np.atleast_1d(items)), dtype=np.int64)

    def _tower(self, feats: np.ndarray, keep: bool = False):
        acts = [feats]
        x = feats
        layers = len(self.config.item_tower_layers)
        for li in range(layers):
            x = x @ self.params[f"tower{li}_W"] + self.params[f"tower{li}_b"]
            if li < layers - 1:
                x = _relu(x)
            acts.append(x)
        return (x, acts) if keep else x

    def forward_rows(self, rows: np.ndarray) -> np.ndarray:
        """Item tower forward for the given rows, without touching the cache."""
        return self._tower(self.params["item_features"][rows])

    def item_embeddings(self) -> np.ndarray:
        """Tower output for every item, cached until parameters change."""
        if self._cache is None:
            self._cache = self._tower(self.params["item_features"])
        return self._cache

    def forward_item(self, item: int) -> np.ndarray:
        return self.item_embeddings()[self.row(item)].copy()

    def export_embeddings(self) -> EmbeddingTable:
        return EmbeddingTable(self.item_ids, self.item_embeddings(), dim=self.config.output_dim)

    def _user_head(self, x: np.ndarray, keep: bool = False):
        acts = [x]
        layers = len(self.config.user_head_layers)
        for li in range(layers):
            x = x @ self.params[f"head{li}_W"] + self.params[f"head{li}_b"]
            if li < layers - 1:
                x = _relu(x)
            acts.append(x)
        logits = x[:, 0]
        return (logits, acts) if keep else (logits, acts[-2])

    def _context(self, user: UserFeatures) -> np.ndarray:
        ctx = np.asarray(user.context, dtype=np.float64).reshape(-1)
        if ctx.size == 0 and self.config.context_dim:
            ctx = np.zeros(self.config.context_dim)
        if ctx.size != self.config.context_dim:
            raise ValueError(f"context width {ctx.size} != configured {self.config.context_dim}")
        return ctx

    def user_pool(self, user: UserFeatures, emb: Optional[np.ndarray] = None) -> np.ndarray:
        emb = self.item_embeddings() if emb is None else emb
        if not user.history:
            return np.zeros(emb.shape[1])
        # sorted rows make the float sum independent of history order
        hist = np.sort(self.rows(user.history[-self.config.history_len:]))
        return emb[hist].mean(axis=0)

    def score_u2i_batch(self, user: UserFeatures, items, emb: Optional[np.ndarray] = None):
        """Logits and final hidden activations for one user against many items."""
        emb = self.item_embeddings() if emb is None else emb
        rows = self.rows(items)
        pool = self.user_pool(user, emb)
        ctx = self._context(user)
        left = np.concatenate([pool, ctx])
        x = np.concatenate([np.broadcast_to(left, (len(rows), left.size)), emb[rows]], axis=1)
        return self._user_head(x)

    def score_i2i_batch(self, a_items, b_items, emb: Optional[np.ndarray] = None):
        emb = self.item_embeddings() if emb is None else emb
        ea = emb[self.rows(a_items)]
        eb = emb[self.rows(b_items)]
        logits = self.config.temperature * np.einsum("ij,ij->i", ea, eb)
        return logits, np.concatenate([ea, eb], axis=1)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)


def forward_item(model: TrainedModel, item: int) -> np.ndarray:
    return model.forward_item(item)


def score_u2i(model: TrainedModel, user: UserFeatures, item: int) -> Tuple[float, np.ndarray]:
    logits, reprs = model.score_u2i_batch(user, [item])
    return float(logits[0]), reprs[0]


def score_i2i(model: TrainedModel, a: int, b: int) -> Tuple[float, np.ndarray]:
    logits, reprs = model.score_i2i_batch([a], [b])
    return float(logits[0]), reprs[0]


# -------------------------------------------------------------------- batches


@dataclass
class TrainBatch:
    hist: np.ndarray        # (B, L) item rows, padded with 0
    mask: np.ndarray        # (B, L) 1.0 where hist is real
    ctx: np.ndarray         # (B, C)
    pair_inst: np.ndarray   # (P,) instance index of each u2i pair
    pair_item: np.ndarray   # (P,) target item row
    pair_label: np.ndarray  # (P,)
    u2i_eps: np.ndarray     # (P, S)
    i2i_a: np.ndarray       # (Q,)
    i2i_b: np.ndarray       # (Q,)
    i2i_label: np.ndarray   # (Q,)
    i2i_eps: np.ndarray     # (Q, S)


@dataclass
class Sample:
    user: int
    history: np.ndarray
    target: int


def build_samples(model: TrainedModel, log: InteractionLog) -> List[Sample]:
    """One (history, next item) sample per interaction after the first, per user."""
    L = model.config.history_len
    samples = []
    for user, seq in sorted(log.item_sequences().items()):
        rows = model.rows(seq)
        for t in range(1, len(rows)):
            samples.append(Sample(user, rows[max(0, t - L):t], int(rows[t])))
    return samples


def make_batch(model: TrainedModel, chunk: Sequence[Sample], positives: Dict[int, np.ndarray],
               rng: np.random.Generator) -> TrainBatch:
    cfg = model.config
    B = len(chunk)
    L = max(len(s.history) for s in chunk)
    hist = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L))
    for b, s in enumerate(chunk):
        hist[b, : len(s.history)] = s.history
        mask[b, : len(s.history)] = 1.0
    targets = np.array([s.target for s in chunk], dtype=np.int64)

    inst, items, labels = [np.arange(B)], [targets], [np.ones(B)]
    if B > 1 and cfg.u2i_negatives:
        # other instances' targets: offset in [1, B) never points back to self
        offs = rng.integers(1, B, size=(B, cfg.u2i_negatives))
        neg = targets[(np.arange(B)[:, None] + offs) % B]
        inst.append(np.repeat(np.arange(B), cfg.u2i_negatives))
        items.append(neg.reshape(-1))
        labels.append(np.zeros(neg.size))
    pair_inst = np.concatenate(inst)
    pair_item = np.concatenate(items)
    pair_label = np.concatenate(labels)

    a_list, b_list, y_list = [], [], []
    for b, t in enumerate(targets):
        pos = positives.get(int(t))
        if pos is not None and len(pos):
            pos = pos[: cfg.sample_pos]
            a_list.append(np.full(len(pos), t))
            b_list.append(pos)
            y_list.append(np.ones(len(pos)))
    if B > 1 and cfg.sample_neg:
        offs = rng.integers(1, B, size=(B, cfg.sample_neg))
        neg = targets[(np.arange(B)[:, None] + offs) % B]
        a_list.append(np.repeat(targets, cfg.sample_neg))
        b_list.append(neg.reshape(-1))
        y_list.append(np.zeros(neg.size))
    if a_list:
        i2i_a = np.concatenate(a_list).astype(np.int64)
        i2i_b = np.concatenate(b_list).astype(np.int64)
        i2i_label = np.concatenate(y_list)
    else:
        i2i_a = i2i_b = np.zeros(0, dtype=np.int64)
        i2i_label = np.zeros(0)

    S = cfg.train_samples
    return TrainBatch(
        hist=hist,
        mask=mask,
        ctx=np.zeros((B, cfg.context_dim)),
        pair_inst=pair_inst,
        pair_item=pair_item,
        pair_label=pair_label,
        u2i_eps=rng.standard_normal((len(pair_item), S)),
        i2i_a=i2i_a,
        i2i_b=i2i_b,
        i2i_label=i2i_label,
        i2i_eps=rng.standard_normal((len(i2i_a), S)),
    )


# ------------------------------------------------------------------ objective


def _tower_backward(model: TrainedModel, acts: List[np.ndarray], d_out: np.ndarray, grads: Dict[str, np.ndarray]):
    layers = len(model.config.item_tower_layers)
    d = d_out
    for li in reversed(range(layers)):
        if li < layers - 1:
            d = d * (acts[li + 1] > 0)
        grads[f"tower{li}_W"] = acts[li].T @ d
        grads[f"tower{li}_b"] = d.sum(axis=0)
        d = d @ model.params[f"tower{li}_W"].T
    return d


def _head_backward(model: TrainedModel, acts: List[np.ndarray], d_logits: np.ndarray, d_repr: np.ndarray,
                   grads: Dict[str, np.ndarray]) -> np.ndarray:
    layers = len(model.config.user_head_layers)
    d = d_logits[:, None]
    for li in reversed(range(layers)):
        if li < layers - 1:
            if li == layers - 2:
                d = d + d_repr
            d = d * (acts[li + 1] > 0)
        grads[f"head{li}_W"] = acts[li].T @ d
        grads[f"head{li}_b"] = d.sum(axis=0)
        d = d @ model.params[f"head{li}_W"].T
    return d


def joint_loss_and_grads(model: TrainedModel, batch: TrainBatch, lambda_i2i: Optional[float] = None):
    """Return ``(total, u2i_loss, i2i_loss, grads)`` for one batch.

    ``grads`` is keyed by :meth:`TrainedModel.param_names`.
    """
    cfg = model.config
    lam = cfg.lambda_i2i if lambda_i2i is None else lambda_i2i
    feats = model.params["item_features"]
    emb, tower_acts = model._tower(feats, keep=True)
    grads: Dict[str, np.ndarray] = {}
    d_emb = np.zeros_like(emb)

    # user-to-item
    counts = batch.mask.sum(axis=1, keepdims=True)
    counts[counts == 0] = 1.0
    weights = batch.mask / counts
    pool = np.einsum("bl,bld->bd", weights, emb[batch.hist])
    left = np.concatenate([pool, batch.ctx], axis=1)
    x = np.concatenate([left[batch.pair_inst], emb[batch.pair_item]], axis=1)
    logits, head_acts = model._user_head(x, keep=True)
    l_u2i, g_u, d_logit, d_repr = model.ue_u2i.loss_and_grads(logits, head_acts[-2], batch.pair_label, batch.u2i_eps)
    d_x = _head_backward(model, head_acts, d_logit, d_repr, grads)
    e = emb.shape[1]
    d_pool = np.zeros_like(pool)
    np.add.at(d_pool, batch.pair_inst, d_x[:, :e])
    np.add.at(d_emb, batch.pair_item, d_x[:, e + cfg.context_dim:])
    np.add.at(d_emb, batch.hist.reshape(-1), (weights[:, :, None] * d_pool[:, None, :]).reshape(-1, e))
    for k, v in g_u.items():
        grads[f"ue_u2i.{k}"] = v

    # item-to-item
    if len(batch.i2i_a):
        ea, eb = emb[batch.i2i_a], emb[batch.i2i_b]
        i_logits = cfg.temperature * np.einsum("ij,ij->i", ea, eb)
        reprs = np.concatenate([ea, eb], axis=1)
        l_i2i, g_i, d_il, d_ir = model.ue_i2i.loss_and_grads(i_logits, reprs, batch.i2i_label, batch.i2i_eps)
        d_il, d_ir = lam * d_il, lam * d_ir
        np.add.at(d_emb, batch.i2i_a, cfg.temperature * d_il[:, None] * eb + d_ir[:, :e])
        np.add.at(d_emb, batch.i2i_b, cfg.temperature * d_il[:, None] * ea + d_ir[:, e:])
        for k, v in g_i.items():
            grads[f"ue_i2i.{k}"] = lam * v
    else:
        l_i2i = 0.0
        for k, v in model.ue_i2i.params().items():
            grads[f"ue_i2i.{k}"] = np.zeros_like(v)

    grads["item_features"] = _tower_backward(model, tower_acts, d_emb, grads)
    return l_u2i + lam * l_i2i, l_u2i, l_i2i, grads


# ------------------------------------------------------------------- training


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, model: TrainedModel, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in model.param_names():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = model.get_param(name)
            model.set_param(name, p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))


def swing_positive_rows(model: TrainedModel, swing: SwingScoreTable, k: int) -> Dict[int, np.ndarray]:
    out = {}
    for item in model.item_ids:
        pos = [p for p in top_positives(swing, int(item), k) if p in model._row]
        if pos:
            out[model.row(int(item))] = model.rows(pos)
    return out


def train(log: InteractionLog, swing: SwingScoreTable, config: ModelConfig,
          item_ids: Optional[Sequence[int]] = None, check_swing_source: bool = True) -> TrainedModel:
    """Mini-batch Adam on the joint objective.

    ``swing`` must come from ``log`` (the training split) unless
    ``check_swing_source`` is off; ``item_ids`` widens the item universe beyond
    the items present in ``log``.
    """
    if len(log) == 0:
        raise TrainingError("empty interaction log")
    if check_swing_source:
        check_leakage(swing, log)
    universe = sorted(set(log.items) | set(int(i) for i in (item_ids if item_ids is not None else ())))
    model = TrainedModel(universe, config)
    samples = build_samples(model, log)
    if not samples:
        raise TrainingError("no user has two or more interactions")
    positives = swing_positive_rows(model, swing, config.sample_pos)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7a1]))
    opt = Adam(lr=config.learning_rate)
    bs = max(1, config.batch_size)

    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        losses = []
        for bi, start in enumerate(range(0, len(samples), bs)):
            chunk = [samples[j] for j in order[start:start + bs]]
            batch = make_batch(model, chunk, positives, rng)
            total, _, _, grads = joint_loss_and_grads(model, batch)
            if not np.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {bi} (learning_rate={config.learning_rate})"
                )
            opt.step(model, grads)
            losses.append(total)
        model.epoch_losses.append(float(np.mean(losses)))
        logger.info("epoch %d mean joint loss %.6f", epoch, model.epoch_losses[-1])
    model.final_epoch_loss = model.epoch_losses[-1] if model.epoch_losses else None
    model.invalidate()
    return model


# --------------------------------------------------------------- persistence


def _config_json(config: ModelConfig) -> bytes:
    return json.dumps(asdict(config), sort_keys=True, separators=(",", ":")).encode()


def save_model(model: TrainedModel, path) -> None:
    blocks = [("item_ids", model.item_ids.astype("<i8"))]
    header = {
        "config": asdict(model.config),
        "ue_u2i": {"seed": model.ue_u2i.seed, "samples": model.ue_u2i.samples},
        "ue_i2i": {"seed": model.ue_i2i.seed, "samples": model.ue_i2i.samples},
        "epoch_losses": model.epoch_losses,
    }
    meta = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, len(meta)))
        fh.write(meta)
        names = model.param_names()
        fh.write(struct.pack("<I", len(names) + 1))
        for name, arr in blocks + [(n, model.get_param(n).astype("<f8")) for n in names]:
            enc = name.encode()
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", 0 if arr.dtype.kind == "i" else 1))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_model(path) -> TrainedModel:
    data = Path(path).read_bytes()
    try:
        if data[:4] != MODEL_MAGIC:
            raise FormatError("not a model file")
        version, meta_len = struct.unpack_from("<II", data, 4)
        if version != MODEL_VERSION:
            raise FormatError(f"unsupported model version {version}")
        off = 12
        header = json.loads(data[off:off + meta_len].decode())
        off += meta_len
        (nblocks,) = struct.unpack_from("<I", data, off)
        off += 4
        arrays = {}
        for _ in range(nblocks):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode()
            off += nlen
            (kind, ndim) = struct.unpack_from("<BI", data, off)
            off += 5
            shape = struct.unpack_from(f"<{ndim}Q", data, off)
            off += 8 * ndim
            dtype = np.dtype("<i8") if kind == 0 else np.dtype("<f8")
            size = int(np.prod(shape)) * dtype.itemsize
            if off + size > len(data):
                raise FormatError(f"truncated block {name}")
            arrays[name] = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape).copy()
            off += size
        if off != len(data):
            raise FormatError("trailing bytes after model blocks")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt model file: {exc}") from None

    config = ModelConfig(**header["config"])
    model = TrainedModel(arrays.pop("item_ids"), config, init="zero")
    model.ue_u2i = HeteroscedasticHead(model.ue_u2i.width, **header["ue_u2i"])
    model.ue_i2i = HeteroscedasticHead(model.ue_i2i.width, **header["ue_i2i"])
    for name in model.param_names():
        if name not in arrays:
            raise FormatError(f"missing parameter block {name}")
        expected = model.get_param(name).shape
        if arrays[name].shape != expected:
            raise FormatError(f"parameter {name} has shape {arrays[name].shape}, expected {expected}")
        model.set_param(name, arrays[name])
    model.epoch_losses = list(header.get("epoch_losses", []))
    model.final_epoch_loss = model.epoch_losses[-1] if model.epoch_losses else None
    return model
