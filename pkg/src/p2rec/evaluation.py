"""Ranking metrics, full-catalog evaluation, activity buckets and Welch's t-test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .data import ConfigError, InteractionDataset

ScoreFn = Callable[[list[np.ndarray]], np.ndarray]


def hr_at_k(rank: int, k: int) -> float:
    if k <= 0:
        raise ConfigError(f"cutoff k must be positive, got {k}")
    if rank < 1:
        raise ValueError(f"rank is 1-based, got {rank}")
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    """Single relevant item, so the ideal DCG is 1."""
    if k <= 0:
        raise ConfigError(f"cutoff k must be positive, got {k}")
    if rank < 1:
        raise ValueError(f"rank is 1-based, got {rank}")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def pessimistic_rank(scores: np.ndarray, target: int) -> int:
    """1 + number of other items scoring at least as high as the target."""
    s = scores[target]
    ahead = int(np.count_nonzero(scores >= s)) - 1
    return ahead + 1


@dataclass
class EvalResult:
    ks: tuple[int, ...]
    users: np.ndarray
    ranks: np.ndarray

    def per_user(self, metric: str, k: int) -> np.ndarray:
        fn = hr_at_k if metric == "hr" else ndcg_at_k
        return np.array([fn(int(r), k) for r in self.ranks], dtype=np.float64)

    def metrics(self) -> dict[str, float]:
        out = {}
        for k in self.ks:
            out[f"HR@{k}"] = float(self.per_user("hr", k).mean()) if len(self.ranks) else float("nan")
            out[f"NDCG@{k}"] = float(self.per_user("ndcg", k).mean()) if len(self.ranks) else float("nan")
        return out

    def subset(self, mask: np.ndarray) -> "EvalResult":
        return EvalResult(self.ks, self.users[mask], self.ranks[mask])


def evaluate(score_fn: ScoreFn, data: InteractionDataset, ks: Sequence[int] = (5, 10),
             mask_history: bool = True, split: str = "test", batch_size: int = 256,
             users: Sequence[int] | None = None) -> EvalResult:
    """Rank the held-out item of each user against the whole catalog.

    ``score_fn`` maps a list of histories to a ``(batch, num_items)`` score
    array. With ``mask_history`` the items already in a user's history are
    pushed to -inf, except the held-out item itself. Ties with the target
    count against it.
    """
    for k in ks:
        if k <= 0:
            raise ConfigError(f"cutoff k must be positive, got {k}")
    users = np.arange(data.num_users) if users is None else np.asarray(users)
    ranks = np.empty(len(users), dtype=np.int64)
    for start in range(0, len(users), batch_size):
        chunk = users[start:start + batch_size]
        hists = [data.history(int(u), split) for u in chunk]
        scores = np.array(score_fn(hists), dtype=np.float64, copy=True)
        for row, (u, hist) in enumerate(zip(chunk, hists)):
            target = data.target(int(u), split)
            if mask_history:
                keep = scores[row, target]
                scores[row, hist] = -np.inf
                scores[row, target] = keep
            ranks[start + row] = pessimistic_rank(scores[row], target)
    return EvalResult(tuple(ks), users, ranks)


def activity_buckets(lengths: np.ndarray, num_buckets: int) -> list[np.ndarray]:
    """Split users into equal-count buckets by ascending activity.

    Users are ordered by (length, index); the user at sorted rank ``r`` of
    ``n`` falls into bucket ``floor(r * B / n)``, i.e. bucket ``b`` covers the
    left-closed rank interval ``[b n / B, (b + 1) n / B)``.
    """
    if num_buckets <= 0:
        raise ConfigError("num_buckets must be positive")
    lengths = np.asarray(lengths)
    order = np.lexsort((np.arange(len(lengths)), lengths))
    n = len(order)
    bucket_of_rank = (np.arange(n) * num_buckets) // max(n, 1)
    return [order[bucket_of_rank == b] for b in range(num_buckets)]


def grouped_evaluate(result: EvalResult, buckets: list[np.ndarray]) -> list[dict]:
    rows = []
    pos = {int(u): i for i, u in enumerate(result.users)}
    for b, members in enumerate(buckets):
        mask = np.zeros(len(result.users), dtype=bool)
        mask[[pos[int(u)] for u in members if int(u) in pos]] = True
        row = {"bucket": b, "size": int(mask.sum())}
        if mask.any():
            row.update(result.subset(mask).metrics())
        else:
            row.update({f"{m}@{k}": None for k in result.ks for m in ("HR", "NDCG")})
        rows.append(row)
    return rows


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    pvalue: float
    df: float


def ttest_two_sample(a, b) -> TTestResult:
    """Welch's unequal-variance two-sample t-test (two-sided)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("both samples need at least two observations")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    diff = a.mean() - b.mean()
    if va + vb == 0:
        return TTestResult(0.0 if diff == 0 else math.copysign(math.inf, diff),
                           1.0 if diff == 0 else 0.0, float("nan"))
    res = stats.ttest_ind(a, b, equal_var=False)
    df = (va + vb) ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    return TTestResult(float(res.statistic), float(res.pvalue), float(df))
