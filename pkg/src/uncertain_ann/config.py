"""Run configuration: one flat set of keys, read from ``key=value`` files and flags."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, fields
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np


class ConfigViolation(ValueError):
    """Unknown key, unparsable value or a value outside its allowed range."""


@dataclass(frozen=True)
class RunConfig:
    # randomness
    seed: int = 0
    # synthetic data
    num_users: int = 600
    num_items: int = 400
    num_categories: int = 24
    zipf_exponent: float = 1.0
    num_clusters: int = 8
    cluster_separation: float = 3.0
    home_weight: float = 0.8
    mean_history: float = 15.0
    min_history: int = 3
    dim: int = 16
    noise_scale: float = 1.0
    # model and training
    embedding_dim: int = 32
    temperature: float = 10.0
    lambda_i2i: float = 0.1
    sample_pos: int = 2
    sample_neg: int = 8
    u2i_negatives: int = 4
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 10
    history_len: int = 20
    train_samples: int = 8
    eval_samples: int = 64
    # swing
    alpha_swing: float = 1.0
    max_user_degree: int = 100
    # index
    n: int = 64
    ef_construction: int = 200
    # reweighting
    alpha: float = 1.0
    m_cap: float = 2.0
    n_prime: int = 32
    ue: str = "model"
    base_variance: float = 0.1
    # retrieval
    beta: float = 0.0
    k: int = 100
    ef_c: int = 0
    T_c: int = 50
    # evaluation and ablation
    metric_n: int = 100
    ablation_seeds: int = 20
    validation_seed: int = 1000
    ablation_users: int = 300
    # paths
    data: str = "data"
    train: str = ""
    truth: str = ""
    items: str = ""
    interactions: str = ""
    model: str = ""
    embeddings: str = ""
    swing: str = ""
    index: str = ""
    retrieval: str = ""
    out: str = ""

    def __post_init__(self) -> None:
        positive = ("num_users", "num_items", "num_categories", "num_clusters", "dim", "embedding_dim",
                    "sample_pos", "sample_neg", "batch_size", "history_len", "train_samples", "eval_samples",
                    "max_user_degree", "ef_construction", "n_prime", "k", "T_c", "metric_n", "ablation_seeds",
                    "ablation_users")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigViolation(f"{name} must be positive")
        for name in ("epochs", "u2i_negatives", "min_history", "ef_c"):
            if getattr(self, name) < 0:
                raise ConfigViolation(f"{name} must be >= 0")
        if self.n < 2:
            raise ConfigViolation("n must be at least 2")
        checks = [
            (self.temperature > 0, "temperature must be > 0"),
            (self.lambda_i2i >= 0, "lambda_i2i must be >= 0"),
            (self.learning_rate > 0, "learning_rate must be > 0"),
            (self.alpha_swing > 0, "alpha_swing must be > 0"),
            (self.alpha > 0, "alpha must be > 0"),
            (self.m_cap > 1, "m_cap must be > 1"),
            (self.base_variance > 0, "base_variance must be > 0"),
            (self.zipf_exponent >= 0, "zipf_exponent must be >= 0"),
            (0 <= self.home_weight <= 1, "home_weight must be in [0, 1]"),
            (self.noise_scale >= 0, "noise_scale must be >= 0"),
            (self.ue in ("model", "count", "none"), "ue must be one of model, count, none"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigViolation(message)

    # ------------------------------------------------------------------ io

    @classmethod
    def keys(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def field_type(cls, key: str) -> type:
        return {f.name: f.type for f in fields(cls)}[key]

    @classmethod
    def coerce(cls, key: str, value: Any) -> Any:
        if key not in cls.keys():
            raise ConfigViolation(f"unknown config key {key!r}")
        kind = cls.field_type(key)
        if not isinstance(value, str):
            return value
        try:
            if kind in ("int", int):
                return int(value)
            if kind in ("float", float):
                return float(value)
        except ValueError:
            raise ConfigViolation(f"bad value for {key}: {value!r}") from None
        return value

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: Optional["RunConfig"] = None) -> "RunConfig":
        base = base or cls()
        clean = {k: cls.coerce(k, v) for k, v in values.items()}
        return dataclasses.replace(base, **clean)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of every setting except file paths, so moving outputs keeps it stable."""
        settings = {k: v for k, v in self.to_dict().items() if k not in PATH_KEYS}
        blob = json.dumps(settings, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def stage_seed(self, stage: str) -> int:
        """Seed for one pipeline stage, derived from the root seed and the stage name."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(stage.encode())])
        return int(ss.generate_state(1, dtype=np.uint32)[0] >> 1)


PATH_KEYS = ("data", "train", "truth", "items", "interactions", "model", "embeddings", "swing", "index",
             "retrieval", "out")


def parse_config_text(text: str) -> Dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: Dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigViolation(f"config line {line_no}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in RunConfig.keys():
            raise ConfigViolation(f"config line {line_no}: unknown config key {key!r}")
        out[key] = value
    return out


def load_config(path) -> Dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())
