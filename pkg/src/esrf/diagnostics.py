"""Inspection exports for a trained model: attention heatmap, overlap with
explicit ties, and ego-network edge lists."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InputError
from .sparse import SparseMatrix


@dataclass(frozen=True)
class OverlapStats:
    per_user: dict  # user -> (overlap count, neighbourhood size)
    global_percent: float


def _require_trained(model) -> None:
    if not getattr(model, "trained", False):
        raise InputError("model has not been trained")
    if getattr(model, "table", None) is None:
        raise InputError("model has no alternative neighbourhoods")


def sample_users(table: np.ndarray, sample: int, seed: int) -> np.ndarray:
    """Up to ``sample`` users with a nonempty neighbourhood, sorted."""
    candidates = np.flatnonzero((table >= 0).any(axis=1))
    if candidates.size <= sample:
        return candidates
    return np.sort(np.random.default_rng(seed).choice(candidates, size=sample, replace=False))


def attention_heatmap(model, users, layer: int = 0) -> np.ndarray:
    """``(len(users), k)`` attention weights of each user's neighbourhood slots."""
    _require_trained(model)
    state = model.state()
    if not state.attention:
        raise InputError("model has no social propagation layers")
    if not 0 <= layer < len(state.attention):
        raise InputError(f"layer {layer} outside 0..{len(state.attention) - 1}")
    return state.attention[layer][np.asarray(users)]


def explicit_ties(s: SparseMatrix) -> list:
    """Per user, the set of users linked in either direction."""
    both = (s + s.T).to_scipy().tocsr()
    return [set(both.indices[both.indptr[u] : both.indptr[u + 1]].tolist()) for u in range(s.n_rows)]


def overlap_stats(table: np.ndarray, s: SparseMatrix) -> OverlapStats:
    """Share of alternative neighbours that are also explicit ties."""
    ties = explicit_ties(s)
    per_user = {}
    hits = total = 0
    for u, row in enumerate(table):
        alt = {int(v) for v in row if v >= 0}
        if not alt:
            continue
        common = len(alt & ties[u])
        per_user[u] = (common, len(alt))
        hits += common
        total += len(alt)
    return OverlapStats(per_user, 100.0 * hits / total if total else 0.0)


def ego_edges(table: np.ndarray, s: SparseMatrix, users) -> list:
    """``(center, neighbour, role)`` rows, role in explicit / alternative / overlap."""
    ties = explicit_ties(s)
    rows = []
    for u in users:
        alt = {int(v) for v in table[u] if v >= 0}
        for v in sorted(alt | ties[u]):
            role = "overlap" if v in alt and v in ties[u] else ("alternative" if v in alt else "explicit")
            rows.append((int(u), v, role))
    return rows


def export_diagnostics(
    model,
    social: SparseMatrix,
    out_dir,
    sample: int = 20,
    seed: int = 0,
    user_labels: Optional[tuple] = None,
    header: str = "",
) -> dict:
    """Write ``attention_heatmap.csv``, ``overlap.tsv`` and ``ego_network.tsv``."""
    _require_trained(model)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    label = (lambda u: user_labels[u]) if user_labels is not None else str
    users = sample_users(model.table, sample, seed)
    paths = {}

    heat = attention_heatmap(model, users) if users.size else np.zeros((0, model.table.shape[1]))
    paths["heatmap"] = out / "attention_heatmap.csv"
    with open(paths["heatmap"], "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user"] + [f"slot{j + 1}" for j in range(heat.shape[1])])
        for u, row in zip(users, heat):
            writer.writerow([label(int(u))] + [f"{w:.8f}" for w in row])

    stats = overlap_stats(model.table, social)
    paths["overlap"] = out / "overlap.tsv"
    with open(paths["overlap"], "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write(f"# global_overlap_percent={stats.global_percent:.3f}\n")
        fh.write("user\toverlap\tneighbourhood\tfraction\n")
        for u, (common, size) in stats.per_user.items():
            fh.write(f"{label(u)}\t{common}\t{size}\t{common / size:.6f}\n")

    paths["ego"] = out / "ego_network.tsv"
    with open(paths["ego"], "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write("center\tneighbour\trole\n")
        for u, v, role in ego_edges(model.table, social, users):
            fh.write(f"{label(u)}\t{label(v)}\t{role}\n")
    return paths
