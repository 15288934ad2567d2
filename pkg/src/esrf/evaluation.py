"""Full-catalogue top-N ranking and precision/recall/NDCG."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .data import InteractionLog
from .errors import InputError


class Scorer(Protocol):
    n_items: int

    def scores(self, users: np.ndarray) -> np.ndarray:
        """Dense ``(len(users), n_items)`` score block."""


@dataclass(frozen=True)
class EmbeddingScorer:
    """Inner-product scores between fixed user and item embeddings."""

    user_emb: np.ndarray
    item_emb: np.ndarray

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0]

    def scores(self, users) -> np.ndarray:
        return self.user_emb[np.asarray(users)] @ self.item_emb.T


@dataclass(frozen=True)
class RandomScorer:
    """Uniform random scores, a floor for sanity checks."""

    n_items: int
    seed: int = 0

    def scores(self, users) -> np.ndarray:
        users = np.asarray(users)
        out = np.empty((len(users), self.n_items))
        for row, u in enumerate(users):
            out[row] = np.random.default_rng((self.seed, int(u))).random(self.n_items)
        return out


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    ndcg: float
    n: int
    user_count: int
    mode: str = "general"


def top_n_from_scores(scores: np.ndarray, exclude, n: int) -> np.ndarray:
    """Top ``n`` item indices by descending score; ties go to the lower index.

    Excluded items never appear.  Fewer than ``n`` items are returned when
    fewer candidates remain.
    """
    if n < 1:
        raise InputError("cutoff n must be at least 1")
    candidates = np.ones(scores.shape[0], dtype=bool)
    candidates[np.asarray(exclude, dtype=np.int64)] = False
    idx = np.flatnonzero(candidates)
    vals = scores[idx]
    if idx.size > n:
        # everything strictly above the n-th best value is certainly in;
        # the remaining slots go to ties in index order
        threshold = np.partition(vals, idx.size - n)[idx.size - n]
        keep = vals >= threshold
        idx, vals = idx[keep], vals[keep]
    order = np.lexsort((idx, -vals))
    return idx[order[:n]]


def rank_top_n(model: Scorer, user: int, exclude, n: int) -> np.ndarray:
    return top_n_from_scores(model.scores(np.array([user]))[0], exclude, n)


def ranking_metrics(recommended, relevant, n: int) -> tuple[float, float, float]:
    """Precision@n, recall@n and NDCG@n with binary gains and log2 discounts."""
    if n < 1:
        raise InputError("cutoff n must be at least 1")
    relevant = set(int(x) for x in relevant)
    if not relevant:
        raise InputError("relevant set is empty")
    hits = 0
    dcg = 0.0
    for position, item in enumerate(list(recommended)[:n]):
        if int(item) in relevant:
            hits += 1
            dcg += 1.0 / math.log2(position + 2)
    idcg = 0.0
    for position in range(min(len(relevant), n)):
        idcg += 1.0 / math.log2(position + 2)
    return hits / n, hits / len(relevant), dcg / idcg


def evaluate_split(
    model: Scorer,
    train: InteractionLog,
    test: InteractionLog,
    n: int = 10,
    mode: str = "general",
    users=None,
    batch_size: int = 256,
) -> MetricsReport:
    """Average ranking metrics over test users with at least one test item.

    Training positives are excluded from each user's ranking.  ``users``
    optionally restricts evaluation to a subset (e.g. cold-start users).
    """
    if len(test) == 0:
        raise InputError("test set is empty")
    train_y, test_y = train.y, test.y
    test_users = np.flatnonzero(np.diff(test_y.row_offsets) > 0)
    if users is not None:
        test_users = np.intersect1d(test_users, np.asarray(users))
    if test_users.size == 0:
        raise InputError("no test user has relevant items")
    totals = np.zeros(3)
    for lo in range(0, test_users.size, batch_size):
        block = test_users[lo : lo + batch_size]
        scores = model.scores(block)
        for row, u in enumerate(block):
            exclude = train_y.row(u)[0] if u < train_y.n_rows else ()
            top = top_n_from_scores(scores[row], exclude, n)
            totals += ranking_metrics(top, test_y.row(u)[0], n)
    p, r, g = totals / test_users.size
    return MetricsReport(float(p), float(r), float(g), n, int(test_users.size), mode)
