"""Interaction datasets: log ingestion, leave-one-out splits and synthetic generation."""

from __future__ import annotations

import hashlib
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MIN_SEQUENCE_LENGTH = 3


class ConfigError(ValueError):
    """Raised for invalid experiment or generator settings."""


class ParseError(ValueError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


@dataclass
class InteractionDataset:
    """Per-user, time-ordered item sequences with a leave-one-out split.

    The last item of every sequence is the test target, the penultimate the
    validation target and everything before it is training history.
    """

    num_users: int
    num_items: int
    sequences: list[np.ndarray]
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)
    dropped_users: int = 0

    def __post_init__(self):
        if not self.user_ids:
            self.user_ids = [str(u) for u in range(self.num_users)]
        if not self.item_ids:
            self.item_ids = [str(v) for v in range(self.num_items)]
        if len(self.sequences) != self.num_users:
            raise ValueError("one sequence per user required")
        for u, seq in enumerate(self.sequences):
            if len(seq) < MIN_SEQUENCE_LENGTH:
                raise ValueError(f"user {u} has {len(seq)} interactions, need >= 3")
            if seq.min() < 0 or seq.max() >= self.num_items:
                raise ValueError(f"user {u} references an item outside [0, {self.num_items})")

    def train(self, u: int) -> np.ndarray:
        return self.sequences[u][:-2]

    def valid(self, u: int) -> int:
        return int(self.sequences[u][-2])

    def test(self, u: int) -> int:
        return int(self.sequences[u][-1])

    def history(self, u: int, split: str) -> np.ndarray:
        """Items visible when predicting the target of ``split``."""
        if split == "valid":
            return self.sequences[u][:-2]
        if split == "test":
            return self.sequences[u][:-1]
        raise ValueError(f"unknown split {split!r}")

    def target(self, u: int, split: str) -> int:
        return self.valid(u) if split == "valid" else self.test(u)

    def train_sequences(self) -> list[np.ndarray]:
        return [s[:-2] for s in self.sequences]

    def train_lengths(self) -> np.ndarray:
        return np.array([len(s) - 2 for s in self.sequences], dtype=np.int64)

    @property
    def num_interactions(self) -> int:
        return int(sum(len(s) for s in self.sequences))

    def to_tsv(self) -> str:
        """Serialize as a headed ``user_id, item_id, timestamp`` log."""
        buf = io.StringIO()
        buf.write("user_id\titem_id\ttimestamp\n")
        for u, seq in enumerate(self.sequences):
            for t, v in enumerate(seq):
                buf.write(f"{self.user_ids[u]}\t{self.item_ids[v]}\t{t}\n")
        return buf.getvalue()

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_tsv().encode()).hexdigest()


def _natural_order(ids):
    try:
        return sorted(ids, key=int)
    except ValueError:
        return sorted(ids)


def _parse_tsv(path: Path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise ParseError(path, line_no, f"expected 3 tab-separated fields, got {len(parts)}")
            user, item, ts = parts[0].strip(), parts[1].strip(), parts[2].strip()
            try:
                stamp = float(ts)
            except ValueError:
                if line_no == 1 and not rows:
                    continue  # header row
                raise ParseError(path, line_no, f"timestamp {ts!r} is not numeric") from None
            if not user or not item:
                raise ParseError(path, line_no, "empty user or item id")
            rows.append((user, item, stamp))
    return rows


def _parse_atomic(path: Path):
    """RecBole atomic ``.inter`` files: typed header such as ``user_id:token``."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n").split("\t")
        names = [h.split(":")[0] for h in header]
        try:
            cu, ci, ct = names.index("user_id"), names.index("item_id"), names.index("timestamp")
        except ValueError:
            raise ParseError(path, 1, f"header lacks user_id/item_id/timestamp: {header}") from None
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) <= max(cu, ci, ct):
                raise ParseError(path, line_no, f"expected {len(header)} fields, got {len(parts)}")
            try:
                stamp = float(parts[ct])
            except ValueError:
                raise ParseError(path, line_no, f"timestamp {parts[ct]!r} is not numeric") from None
            rows.append((parts[cu], parts[ci], stamp))
    return rows


_FORMATS = {"tsv": _parse_tsv, "atomic": _parse_atomic}


def load_interactions(path, format: str = "tsv") -> InteractionDataset:
    """Read an interaction log and build a leave-one-out dataset.

    Users with fewer than three interactions are dropped. Sequences are sorted
    by timestamp with ties kept in file order, and users and items are
    re-indexed densely from 0.
    """
    path = Path(path)
    if format not in _FORMATS:
        raise ConfigError(f"unknown log format {format!r}; expected one of {sorted(_FORMATS)}")
    rows = _FORMATS[format](path)

    per_user: dict[str, list[tuple[float, int, str]]] = {}
    for order, (user, item, stamp) in enumerate(rows):
        per_user.setdefault(user, []).append((stamp, order, item))

    kept = {}
    dropped = 0
    for user, events in per_user.items():
        if len(events) < MIN_SEQUENCE_LENGTH:
            dropped += 1
            continue
        events.sort(key=lambda e: (e[0], e[1]))
        kept[user] = [item for _, _, item in events]
    if dropped:
        logger.info("dropped %d users with fewer than %d interactions", dropped, MIN_SEQUENCE_LENGTH)

    user_ids = _natural_order(kept)
    item_ids = _natural_order({item for items in kept.values() for item in items})
    item_index = {item: i for i, item in enumerate(item_ids)}
    sequences = [np.array([item_index[i] for i in kept[u]], dtype=np.int64) for u in user_ids]
    return InteractionDataset(
        num_users=len(user_ids),
        num_items=len(item_ids),
        sequences=sequences,
        user_ids=user_ids,
        item_ids=item_ids,
        dropped_users=dropped,
    )


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings for datasets with planted latent categories.

    ``sharpness`` is the Dirichlet concentration placed on each user's primary
    category (all other categories get 1), so large values concentrate a user
    on a single category. Items inside a category follow a Zipf popularity
    with exponent ``popularity_skew``.
    """

    num_users: int = 1000
    num_items: int = 200
    num_categories: int = 8
    sharpness: float = 50.0
    seq_len_range: tuple[int, int] = (10, 30)
    corruption_rate: float = 0.0
    popularity_skew: float = 1.0
    seed: int = 0

    def validate(self):
        lo, hi = self.seq_len_range
        if lo < MIN_SEQUENCE_LENGTH:
            raise ConfigError(f"seq_len_range minimum {lo} < {MIN_SEQUENCE_LENGTH}")
        if hi < lo:
            raise ConfigError(f"seq_len_range {self.seq_len_range} is empty")
        if self.num_categories < 2:
            raise ConfigError("num_categories must be >= 2")
        if self.num_items < self.num_categories:
            raise ConfigError("num_items must be >= num_categories")
        if self.num_users < 1:
            raise ConfigError("num_users must be >= 1")
        if hi > self.num_items:
            raise ConfigError("sequences longer than the catalog cannot avoid repeats")
        if self.sharpness <= 0:
            raise ConfigError("sharpness must be positive")
        if not 0.0 <= self.corruption_rate < 1.0:
            raise ConfigError("corruption_rate must lie in [0, 1)")


@dataclass
class PlantedLabels:
    """Ground-truth item categories plus a deliberately corrupted copy."""

    labels: np.ndarray
    corrupted: np.ndarray
    corrupted_mask: np.ndarray


def generate_synthetic(spec: SyntheticSpec) -> tuple[InteractionDataset, PlantedLabels]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    K, N = spec.num_categories, spec.num_items

    labels = np.empty(N, dtype=np.int64)
    labels[rng.permutation(N)] = np.arange(N) % K
    members = [np.flatnonzero(labels == c) for c in range(K)]
    # Zipf popularity by a random within-category rank
    popularity = []
    for items in members:
        ranks = rng.permutation(len(items)) + 1
        w = ranks.astype(np.float64) ** -spec.popularity_skew
        popularity.append(w / w.sum())

    lo, hi = spec.seq_len_range
    sequences = []
    for _ in range(spec.num_users):
        primary = rng.integers(K)
        conc = np.ones(K)
        conc[primary] = spec.sharpness
        pref = rng.dirichlet(conc)
        length = int(rng.integers(lo, hi + 1))
        used = np.zeros(N, dtype=bool)
        seq = np.empty(length, dtype=np.int64)
        for t in range(length):
            c = rng.choice(K, p=pref)
            avail = ~used[members[c]]
            if not avail.any():
                # category exhausted: fall back to any unused item
                cands = np.flatnonzero(~used)
                v = int(cands[rng.integers(len(cands))])
            else:
                w = popularity[c] * avail
                v = int(members[c][rng.choice(len(w), p=w / w.sum())])
            used[v] = True
            seq[t] = v
        sequences.append(seq)

    corrupted = labels.copy()
    n_flip = int(round(spec.corruption_rate * N))
    flip = rng.choice(N, size=n_flip, replace=False) if n_flip else np.array([], dtype=np.int64)
    corrupted[flip] = (labels[flip] + rng.integers(1, K, size=n_flip)) % K
    mask = np.zeros(N, dtype=bool)
    mask[flip] = True

    data = InteractionDataset(num_users=spec.num_users, num_items=N, sequences=sequences)
    return data, PlantedLabels(labels=labels, corrupted=corrupted, corrupted_mask=mask)
