"""Latent-category priors: k-means over item embeddings and per-user targets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .artifacts import Kind
from .data import ConfigError, InteractionDataset

logger = logging.getLogger(__name__)


class SSEIncreaseError(AssertionError):
    pass


@dataclass
class GroupModel:
    """K centroids and the item -> group map C(.)."""

    KIND = Kind.GROUP_MODEL

    centroids: np.ndarray
    assignment: np.ndarray
    sse: float = float("nan")
    sse_history: list[float] = field(default_factory=list)

    @property
    def K(self) -> int:
        return int(self.centroids.shape[0])

    def to_tensors(self):
        return ({"centroids": self.centroids.astype(np.float32), "assignment": self.assignment},
                {"sse": self.sse, "sse_history": self.sse_history})

    @classmethod
    def from_tensors(cls, tensors, meta):
        return cls(tensors["centroids"], tensors["assignment"].astype(np.int64),
                   meta.get("sse", float("nan")), list(meta.get("sse_history", [])))

    @classmethod
    def from_labels(cls, embeddings: np.ndarray, labels: np.ndarray, K: int) -> "GroupModel":
        """Group model for an externally supplied labelling (centroid = member mean)."""
        emb = np.asarray(embeddings, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        cents = np.zeros((K, emb.shape[1]))
        for c in range(K):
            if (labels == c).any():
                cents[c] = emb[labels == c].mean(axis=0)
        return cls(cents.astype(np.float32), labels, _sse(emb, cents, labels))


def _sse(x, centroids, labels) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def _sq_dists(x, centroids):
    # exact difference form; the expanded dot-product form loses monotonicity to cancellation
    out = np.empty((len(x), len(centroids)))
    for c, mu in enumerate(centroids):
        out[:, c] = ((x - mu) ** 2).sum(axis=1)
    return out


def kmeans_plusplus(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rest[rng.integers(len(rest))])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _lloyd(x, centroids, max_iter, tol=1e-9):
    K = len(centroids)
    labels = _sq_dists(x, centroids).argmin(axis=1)
    history = [_sse(x, centroids, labels)]
    for _ in range(max_iter):
        counts = np.bincount(labels, minlength=K)
        for empty in np.flatnonzero(counts == 0):
            # split the largest cluster at its farthest member
            big = int(counts.argmax())
            members = np.flatnonzero(labels == big)
            far = members[((x[members] - centroids[big]) ** 2).sum(axis=1).argmax()]
            labels[far] = empty
            centroids[empty] = x[far]
            counts = np.bincount(labels, minlength=K)
        for c in range(K):
            centroids[c] = x[labels == c].mean(axis=0)
        d = _sq_dists(x, centroids)
        new_labels = d.argmin(axis=1)
        # keep the current label on exact distance ties so the loop reaches a fixpoint
        rows = np.arange(len(x))
        tied = d[rows, labels] <= d[rows, new_labels]
        new_labels = np.where(tied, labels, new_labels)
        sse = _sse(x, centroids, new_labels)
        if sse > history[-1] * (1 + tol) + tol:
            raise SSEIncreaseError(f"SSE rose from {history[-1]} to {sse}")
        history.append(sse)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centroids, labels, history


def fit_kmeans(embeddings: np.ndarray, K: int, seed: int = 0, restarts: int = 5,
               max_iter: int = 300) -> GroupModel:
    """Lloyd's algorithm from k-means++ seeds, best of ``restarts`` by SSE.

    Every run stops at an assignment fixpoint or after ``max_iter`` updates;
    the within-cluster SSE is checked to be non-increasing at each step.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = len(x)
    if K < 1 or K > n:
        raise ConfigError(f"K={K} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        cents, labels, hist = _lloyd(x, kmeans_plusplus(x, K, rng), max_iter)
        if best is None or hist[-1] < best[2][-1]:
            best = (cents, labels, hist)
    cents, labels, hist = best
    return GroupModel(cents.astype(np.float32), labels.astype(np.int64), hist[-1], hist)


@dataclass
class PreferenceTargets:
    """Per-user group counts g^u and their L1-normalized form."""

    KIND = Kind.PREFERENCE_TARGETS

    users: np.ndarray
    counts: np.ndarray
    dist: np.ndarray

    @property
    def K(self) -> int:
        return int(self.counts.shape[1])

    def to_tensors(self):
        return {"users": self.users, "counts": self.counts, "dist": self.dist}, {}

    @classmethod
    def from_tensors(cls, tensors, meta):
        return cls(tensors["users"].astype(np.int64), tensors["counts"].astype(np.int64), tensors["dist"])

    def row(self, user: int) -> np.ndarray:
        return self.dist[np.searchsorted(self.users, user)]


def build_targets(data: InteractionDataset, groups: GroupModel | np.ndarray,
                  K: int | None = None, distinct: bool = False) -> PreferenceTargets:
    """Count each user's training interactions per group and normalize.

    Repeat interactions are counted each time unless ``distinct`` is set.
    Users without training interactions are left out.
    """
    assignment = groups.assignment if isinstance(groups, GroupModel) else np.asarray(groups)
    K = groups.K if isinstance(groups, GroupModel) else int(K)
    if len(assignment) < data.num_items:
        raise ConfigError("group assignment does not cover every item")
    users, rows = [], []
    skipped = 0
    for u in range(data.num_users):
        items = data.train(u)
        if distinct:
            items = np.unique(items)
        if len(items) == 0:
            skipped += 1
            continue
        users.append(u)
        rows.append(np.bincount(assignment[items], minlength=K))
    if skipped:
        logger.info("excluded %d users with no training interactions", skipped)
    counts = np.array(rows, dtype=np.int64).reshape(-1, K)
    dist = (counts / counts.sum(axis=1, keepdims=True)).astype(np.float32)
    return PreferenceTargets(np.array(users, dtype=np.int64), counts, dist)
