"""Domain types shared across the package: interaction logs and embedding tables."""

from __future__ import annotations

import hashlib
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

EVENTS = ("click", "purchase", "cart", "favorite")

EMB_MAGIC = b"UEMB"
EMB_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected layout."""


class ParseError(FormatError):
    def __init__(self, line_no: int, message: str) -> None:
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ValidationError(ValueError):
    """Well-formed input that violates a domain invariant."""


@dataclass(frozen=True, order=True)
class Interaction:
    user: int
    item: int
    category: int
    timestamp: int
    event: str = "click"

    def __post_init__(self) -> None:
        if self.timestamp < 0:
            raise ValidationError(f"negative timestamp {self.timestamp}")
        if self.event not in EVENTS:
            raise ValidationError(f"unknown event {self.event!r}")
        if min(self.user, self.item, self.category) < 0:
            raise ValidationError("identifiers must be non-negative")


def _sort_key(it: Interaction) -> Tuple[int, int, int]:
    return (it.user, it.timestamp, it.item)


class InteractionLog:
    """Interactions sorted by (user, timestamp, item)."""

    def __init__(self, interactions: Iterable[Interaction] = ()) -> None:
        self.interactions: Tuple[Interaction, ...] = tuple(sorted(interactions, key=_sort_key))

    def __len__(self) -> int:
        return len(self.interactions)

    def __iter__(self):
        return iter(self.interactions)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, InteractionLog) and self.interactions == other.interactions

    @property
    def users(self) -> List[int]:
        return sorted({it.user for it in self.interactions})

    @property
    def items(self) -> List[int]:
        return sorted({it.item for it in self.interactions})

    @property
    def categories(self) -> List[int]:
        return sorted({it.category for it in self.interactions})

    def counts(self) -> Dict[str, int]:
        return {
            "lines": len(self.interactions),
            "users": len(self.users),
            "items": len(self.items),
            "categories": len(self.categories),
        }

    def sequences(self) -> Dict[int, List[Interaction]]:
        """Per-user behavior sequences, oldest first."""
        seqs: Dict[int, List[Interaction]] = defaultdict(list)
        for it in self.interactions:
            seqs[it.user].append(it)
        return dict(seqs)

    def item_sequences(self) -> Dict[int, List[int]]:
        return {u: [it.item for it in seq] for u, seq in self.sequences().items()}

    def category_of(self) -> Dict[int, int]:
        """Item -> category; the latest interaction wins if the log disagrees."""
        return {it.item: it.category for it in self.interactions}

    def item_counts(self) -> Dict[int, int]:
        counts: Dict[int, int] = defaultdict(int)
        for it in self.interactions:
            counts[it.item] += 1
        return dict(counts)

    def user_counts(self) -> Dict[int, int]:
        counts: Dict[int, int] = defaultdict(int)
        for it in self.interactions:
            counts[it.user] += 1
        return dict(counts)

    def digest(self) -> str:
        h = hashlib.sha256()
        for it in self.interactions:
            h.update(f"{it.user}\t{it.item}\t{it.category}\t{it.timestamp}\t{it.event}\n".encode())
        return h.hexdigest()[:16]


@dataclass
class UserFeatures:
    user: int
    history: List[int]
    context: np.ndarray = field(default_factory=lambda: np.zeros(0))


def ingest_interactions(path, format: str = "tsv") -> InteractionLog:
    """Parse a tab-separated interaction file.

    Lines starting with ``#`` and blank lines are ignored.
    """
    if format != "tsv":
        raise ValueError(f"unsupported format {format!r}")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ParseError(line_no, f"expected 5 fields, got {len(parts)}")
            try:
                user, item, cat, ts = (int(p) for p in parts[:4])
            except ValueError as exc:
                raise ParseError(line_no, str(exc)) from None
            event = parts[4]
            if event not in EVENTS:
                raise ValidationError(f"line {line_no}: unknown event {event!r}")
            try:
                records.append(Interaction(user, item, cat, ts, event))
            except ValidationError as exc:
                raise ValidationError(f"line {line_no}: {exc}") from None
    return InteractionLog(records)


def write_interactions(log: InteractionLog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for it in log:
            fh.write(f"{it.user}\t{it.item}\t{it.category}\t{it.timestamp}\t{it.event}\n")


def split_leave_one_out(log: InteractionLog) -> Tuple[InteractionLog, Dict[int, set]]:
    """Hold out each user's temporally last interaction.

    Users with a single interaction stay in train and get no ground truth.
    """
    train: List[Interaction] = []
    truth: Dict[int, set] = {}
    for user, seq in log.sequences().items():
        if len(seq) >= 2:
            train.extend(seq[:-1])
            truth[user] = {seq[-1].item}
        else:
            train.extend(seq)
    return InteractionLog(train), truth


def write_truth(truth: Mapping[int, set], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for user in sorted(truth):
            for item in sorted(truth[user]):
                fh.write(f"{user}\t{item}\n")


def read_truth(path) -> Dict[int, set]:
    truth: Dict[int, set] = defaultdict(set)
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(line_no, "expected user<TAB>item")
            try:
                truth[int(parts[0])].add(int(parts[1]))
            except ValueError as exc:
                raise ParseError(line_no, str(exc)) from None
    return dict(truth)


def truth_digest(truth: Mapping[int, set]) -> str:
    h = hashlib.sha256()
    for user in sorted(truth):
        h.update(f"{user}:{','.join(map(str, sorted(truth[user])))};".encode())
    return h.hexdigest()[:16]


class EmbeddingTable:
    """Item id -> float32 vector of a fixed width.

    Vectors are held as float32 so the binary format round-trips bit-exactly.
    """

    def __init__(self, ids: Sequence[int], vectors, dim: int | None = None) -> None:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim == 1 and len(ids) == 0:
            vectors = vectors.reshape(0, dim or 0)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise ValidationError("vectors must be a (count, dim) matrix matching ids")
        if dim is not None and vectors.shape[1] != dim:
            raise ValidationError(f"declared dim {dim} but vectors have {vectors.shape[1]}")
        if len(np.unique(ids)) != len(ids):
            raise ValidationError("duplicate item id in embedding table")
        if (ids < 0).any():
            raise ValidationError("item ids must be non-negative")
        if not np.isfinite(vectors).all():
            raise ValidationError("embedding table contains non-finite values")
        self.ids = ids
        self.vectors = vectors
        self.dim = int(vectors.shape[1]) if dim is None else int(dim)
        self._row = {int(i): r for r, i in enumerate(ids)}

    @classmethod
    def from_dict(cls, entries: Mapping[int, Sequence[float]], dim: int | None = None) -> "EmbeddingTable":
        ids = sorted(entries)
        vecs = [entries[i] for i in ids]
        if not ids:
            return cls([], np.zeros((0, dim or 0)), dim=dim or 0)
        return cls(ids, vecs, dim=dim)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item: int) -> bool:
        return int(item) in self._row

    def __getitem__(self, item: int) -> np.ndarray:
        try:
            return self.vectors[self._row[int(item)]]
        except KeyError:
            raise KeyError(f"unknown item {item}") from None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingTable):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.vectors, other.vectors)
        )

    def row(self, item: int) -> int:
        return self._row[int(item)]


def save_embeddings(table: EmbeddingTable, path, binary: bool = True) -> None:
    if binary:
        with open(path, "wb") as fh:
            fh.write(EMB_MAGIC)
            fh.write(struct.pack("<IQI", EMB_VERSION, len(table), table.dim))
            rec = np.dtype([("id", "<u8"), ("v", "<f4", (table.dim,))])
            arr = np.empty(len(table), dtype=rec)
            arr["id"] = table.ids
            arr["v"] = table.vectors
            fh.write(arr.tobytes())
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(table)} {table.dim}\n")
        for i, vec in zip(table.ids, table.vectors):
            fh.write(" ".join([str(int(i))] + [repr(float(x)) for x in vec]) + "\n")


def load_embeddings(path) -> EmbeddingTable:
    """Load either layout; the binary one is recognised by its magic bytes."""
    data = Path(path).read_bytes()
    if data[:4] == EMB_MAGIC:
        if len(data) < 20:
            raise FormatError("truncated embedding header")
        version, count, dim = struct.unpack_from("<IQI", data, 4)
        if version != EMB_VERSION:
            raise FormatError(f"unsupported embedding file version {version}")
        rec = np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])
        body = data[20:]
        if len(body) != count * rec.itemsize:
            raise FormatError(f"expected {count} records of dim {dim}, body has {len(body)} bytes")
        arr = np.frombuffer(body, dtype=rec)
        return EmbeddingTable(arr["id"].astype(np.int64), arr["v"].reshape(count, dim), dim=dim)

    lines = data.decode("utf-8").splitlines()
    if not lines:
        raise FormatError("missing header")
    try:
        count, dim = (int(x) for x in lines[0].split())
    except ValueError:
        raise FormatError("header must be '<count> <dim>'") from None
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise FormatError(f"header declares {count} rows, found {len(body)}")
    ids, vecs = [], []
    for line_no, line in enumerate(body, start=2):
        parts = line.split()
        if len(parts) != dim + 1:
            raise FormatError(f"line {line_no}: expected {dim} components, got {len(parts) - 1}")
        ids.append(int(parts[0]))
        vecs.append([float(x) for x in parts[1:]])
    return EmbeddingTable(ids, np.asarray(vecs, dtype=np.float64).reshape(count, dim), dim=dim)
