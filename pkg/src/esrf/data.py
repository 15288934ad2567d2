"""Rating / trust ingestion, index spaces and cross-validation splits."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import InputError, ParseError
from .sparse import SparseMatrix, csr_from_triplets

log = logging.getLogger(__name__)


def _label_key(label: str):
    # numeric labels sort numerically, everything else lexically after them
    try:
        return (0, int(label), "")
    except ValueError:
        return (1, 0, label)


def _index_labels(labels: Iterable[str]) -> tuple[str, ...]:
    return tuple(sorted(set(labels), key=_label_key))


@dataclass(frozen=True, eq=False)
class InteractionLog:
    """Binary implicit feedback over dense user and item index spaces.

    ``positives`` is an ``(nnz, 2)`` array of ``(user, item)`` pairs sorted by
    user then item, without duplicates.
    """

    user_labels: tuple
    item_labels: tuple
    positives: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positives, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "positives", pos)
        if pos.size:
            keys = pos[:, 0] * max(len(self.item_labels), 1) + pos[:, 1]
            if np.any(np.diff(keys) <= 0):
                raise InputError("positives must be sorted and duplicate free")

    @property
    def n_users(self) -> int:
        return len(self.user_labels)

    @property
    def n_items(self) -> int:
        return len(self.item_labels)

    def __len__(self) -> int:
        return len(self.positives)

    @cached_property
    def y(self) -> SparseMatrix:
        ones = np.ones(len(self.positives))
        return SparseMatrix.from_scipy(
            _coo(self.positives[:, 0], self.positives[:, 1], ones, (self.n_users, self.n_items))
        )

    @cached_property
    def user_index(self) -> dict:
        return {label: i for i, label in enumerate(self.user_labels)}

    @cached_property
    def item_index(self) -> dict:
        return {label: i for i, label in enumerate(self.item_labels)}

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.positives[:, 0], minlength=self.n_users)

    def items_of(self, user: int) -> np.ndarray:
        return self.y.row(user)[0]

    def subset(self, keep) -> "InteractionLog":
        keep = np.asarray(keep)
        return InteractionLog(self.user_labels, self.item_labels, self.positives[keep])

    def with_user_labels(self, user_labels: Sequence[str]) -> "InteractionLog":
        """Re-express the log in a larger user space whose prefix is the current one."""
        if tuple(user_labels[: self.n_users]) != tuple(self.user_labels):
            raise InputError("new user space must extend the current one")
        return InteractionLog(tuple(user_labels), self.item_labels, self.positives)


def _coo(rows, cols, vals, shape):
    import scipy.sparse as sp

    return sp.coo_matrix((vals, (rows, cols)), shape=shape)


def from_pairs(pairs, n_users: int, n_items: int) -> InteractionLog:
    """Build a log over labels ``"0".."n-1"`` from index pairs (duplicates collapsed)."""
    pairs = np.unique(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=0)
    return InteractionLog(
        tuple(str(i) for i in range(n_users)), tuple(str(i) for i in range(n_items)), pairs
    )


def _read_rows(path, min_fields: int, max_fields: int, skip_header: bool):
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if skip_header:
                skip_header = False
                continue
            fields = line.split("\t") if "\t" in line else line.split()
            if not min_fields <= len(fields) <= max_fields:
                raise ParseError(path, line_no, f"expected {min_fields}-{max_fields} fields, got {len(fields)}")
            yield line_no, [f.strip() for f in fields]


def load_feedback(
    path,
    rating_threshold: Optional[float] = None,
    skip_header: bool = False,
) -> InteractionLog:
    """Read ``user<TAB>item[<TAB>weight]`` records into a binary log.

    With ``rating_threshold`` only rows whose weight is strictly greater are
    kept; without it the weight column is ignored.
    """
    users, items = [], []
    for line_no, fields in _read_rows(path, 2, 3, skip_header):
        if rating_threshold is not None:
            if len(fields) < 3:
                raise ParseError(path, line_no, "missing weight column")
            try:
                weight = float(fields[2])
            except ValueError:
                raise ParseError(path, line_no, f"weight {fields[2]!r} is not a number") from None
            if not weight > rating_threshold:
                continue
        users.append(fields[0])
        items.append(fields[1])
    if not users:
        raise InputError(f"{path}: no feedback records survived loading")
    user_labels = _index_labels(users)
    item_labels = _index_labels(items)
    ui = {label: i for i, label in enumerate(user_labels)}
    ii = {label: i for i, label in enumerate(item_labels)}
    pairs = np.array([(ui[u], ii[i]) for u, i in zip(users, items)], dtype=np.int64)
    pairs = np.unique(pairs, axis=0)
    return InteractionLog(user_labels, item_labels, pairs)


@dataclass(frozen=True, eq=False)
class SocialLog:
    """Directed binary trust matrix over ``user_labels`` (no self-loops)."""

    user_labels: tuple
    s: SparseMatrix

    @property
    def n_users(self) -> int:
        return len(self.user_labels)


def load_social(path, user_labels: Sequence[str] = (), skip_header: bool = False) -> SocialLog:
    """Read ``truster<TAB>trustee`` rows.

    Users unknown to ``user_labels`` are appended (in label order) after the
    existing ones; self-loops and duplicate rows are dropped.
    """
    known = {label: i for i, label in enumerate(user_labels)}
    rows = []
    for _, fields in _read_rows(path, 2, 3, skip_header):
        rows.append((fields[0], fields[1]))
    extra = _index_labels(x for pair in rows for x in pair if x not in known)
    labels = tuple(user_labels) + extra
    index = {label: i for i, label in enumerate(labels)}
    triplets = {(index[a], index[b]) for a, b in rows if a != b}
    m = len(labels)
    s = csr_from_triplets(m, m, [(a, b, 1.0) for a, b in sorted(triplets)])
    return SocialLog(labels, s)


@dataclass(frozen=True, eq=False)
class SocialDataset:
    feedback: InteractionLog
    social: SocialLog

    @property
    def n_users(self) -> int:
        return self.feedback.n_users

    @property
    def n_items(self) -> int:
        return self.feedback.n_items


def load_dataset(
    ratings,
    trust,
    rating_threshold: Optional[float] = None,
    skip_header: bool = False,
) -> SocialDataset:
    feedback = load_feedback(ratings, rating_threshold, skip_header=skip_header)
    social = load_social(trust, feedback.user_labels, skip_header=skip_header)
    feedback = feedback.with_user_labels(social.user_labels)
    return SocialDataset(feedback, social)


def write_feedback(log_: InteractionLog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in log_.positives:
            fh.write(f"{log_.user_labels[u]}\t{log_.item_labels[i]}\t1\n")


def write_social(social: SocialLog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, v in zip(social.s.row_indices(), social.s.col_indices):
            fh.write(f"{social.user_labels[u]}\t{social.user_labels[v]}\n")


@dataclass(frozen=True, eq=False)
class SplitPlan:
    fold_count: int
    seed: int
    folds: np.ndarray  # fold index per positive, aligned with log.positives

    def train_test(self, log_: InteractionLog, fold: int) -> tuple[InteractionLog, InteractionLog]:
        if not 0 <= fold < self.fold_count:
            raise InputError(f"fold {fold} outside 0..{self.fold_count - 1}")
        if len(self.folds) != len(log_):
            raise InputError("split plan does not belong to this log")
        test = self.folds == fold
        return log_.subset(~test), log_.subset(test)


def kfold_split(log_: InteractionLog, folds: int = 5, seed: int = 0) -> SplitPlan:
    """Per-user stratified random partition of the positives into ``folds`` parts.

    Each user's positives are shuffled and dealt round-robin from a random
    starting fold, so per-user fold sizes differ by at most one.
    """
    if folds < 2:
        raise InputError("need at least two folds")
    rng = np.random.default_rng(seed)
    assign = np.empty(len(log_), dtype=np.int64)
    bounds = np.searchsorted(log_.positives[:, 0], np.arange(log_.n_users + 1))
    for u in range(log_.n_users):
        lo, hi = bounds[u], bounds[u + 1]
        if hi == lo:
            continue
        order = rng.permutation(hi - lo)
        start = rng.integers(folds)
        assign[lo + order] = (start + np.arange(hi - lo)) % folds
    return SplitPlan(folds, seed, assign)


def holdout_split(log_: InteractionLog, fraction: float, seed: int) -> tuple[InteractionLog, InteractionLog]:
    """Hold out ``floor(fraction * count)`` positives of every user for validation."""
    rng = np.random.default_rng(seed)
    held = np.zeros(len(log_), dtype=bool)
    bounds = np.searchsorted(log_.positives[:, 0], np.arange(log_.n_users + 1))
    for u in range(log_.n_users):
        lo, hi = bounds[u], bounds[u + 1]
        k = int(np.floor(fraction * (hi - lo)))
        if k:
            held[lo + rng.choice(hi - lo, size=k, replace=False)] = True
    return log_.subset(~held), log_.subset(held)


def cold_start_filter(log_: InteractionLog, max_records: int = 20) -> InteractionLog:
    """Keep the interactions of users with strictly fewer than ``max_records`` records."""
    if max_records < 1:
        raise InputError("max_records must be at least 1")
    counts = log_.user_counts()
    return log_.subset(counts[log_.positives[:, 0]] < max_records)


def restrict_users(log_: InteractionLog, users) -> InteractionLog:
    keep = np.zeros(log_.n_users, dtype=bool)
    keep[np.asarray(users, dtype=np.int64)] = True
    return log_.subset(keep[log_.positives[:, 0]])


def write_split_manifest(log_: InteractionLog, plan: SplitPlan, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# folds={plan.fold_count} seed={plan.seed}\n")
        for (u, i), f in zip(log_.positives, plan.folds):
            fh.write(f"{log_.user_labels[u]}\t{log_.item_labels[i]}\t{f}\n")


def read_split_manifest(log_: InteractionLog, path, fold_count: int) -> SplitPlan:
    assign = np.full(len(log_), -1, dtype=np.int64)
    keys = log_.positives[:, 0] * log_.n_items + log_.positives[:, 1]
    for line_no, fields in _read_rows(path, 3, 3, False):
        u = log_.user_index.get(fields[0])
        i = log_.item_index.get(fields[1])
        if u is None or i is None:
            raise ParseError(path, line_no, "unknown user or item")
        pos = np.searchsorted(keys, u * log_.n_items + i)
        if pos >= len(keys) or keys[pos] != u * log_.n_items + i:
            raise ParseError(path, line_no, "pair not among the positives")
        assign[pos] = int(fields[2])
    if np.any(assign < 0):
        raise InputError(f"{path}: manifest does not cover every positive")
    return SplitPlan(fold_count, -1, assign)


def make_synthetic(
    n_users: int = 60,
    n_items: int = 80,
    n_groups: int = 4,
    items_per_user: int = 12,
    friends_per_user: int = 4,
    noise: float = 0.1,
    seed: int = 0,
) -> SocialDataset:
    """Small planted-community dataset: users of a group share taste and friends.

    Each user draws most positives from the group's item block and follows
    mostly users of the same group; ``noise`` is the share of out-of-group
    draws in both.
    """
    rng = np.random.default_rng(seed)
    group_u = np.arange(n_users) % n_groups
    group_i = np.arange(n_items) % n_groups
    pairs = []
    for u in range(n_users):
        own = np.flatnonzero(group_i == group_u[u])
        other = np.flatnonzero(group_i != group_u[u])
        n_own = min(len(own), int(round(items_per_user * (1 - noise))))
        n_other = min(len(other), items_per_user - n_own)
        # popularity skew inside the block
        p = 1.0 / np.arange(1, len(own) + 1)
        chosen = rng.choice(own, size=n_own, replace=False, p=p / p.sum())
        pairs += [(u, i) for i in chosen]
        pairs += [(u, i) for i in rng.choice(other, size=n_other, replace=False)]
    edges = set()
    for u in range(n_users):
        mates = np.flatnonzero((group_u == group_u[u]) & (np.arange(n_users) != u))
        others = np.flatnonzero(group_u != group_u[u])
        for _ in range(friends_per_user):
            pool = others if rng.random() < noise else mates
            v = int(rng.choice(pool))
            edges.add((u, v))
            if rng.random() < 0.5:
                edges.add((v, u))
    fb = from_pairs(pairs, n_users, n_items)
    s = csr_from_triplets(n_users, n_users, [(a, b, 1.0) for a, b in sorted(edges)])
    return SocialDataset(fb, SocialLog(fb.user_labels, s))
