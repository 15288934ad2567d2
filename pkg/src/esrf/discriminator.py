"""Attentive graph-convolutional ranking model.

User embeddings at layer ``l + 1`` combine attention-weighted alternative
neighbours with the symmetric-normalised item aggregation; items aggregate
from the users who consumed them.  Final embeddings are the layer mean.

The attention score of neighbour ``v`` for user ``u`` under context item
``i`` is ``q . sigmoid([W1 (e_u + e_v) ; W2 e_i])``.  Because the sigmoid
acts elementwise, the score splits into ``q[:d] . sigmoid(W1 (e_u + e_v))``
plus a term that depends on ``i`` only, and that term cancels in the
softmax over ``v``.  Propagation therefore defaults to the context-free
form; passing per-user context items evaluates the full expression.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .errors import InputError
from .numerics import Tape, Var
from .sparse import SparseMatrix


@dataclass
class DiscriminatorParams:
    user_e0: np.ndarray  # m x d
    item_e0: np.ndarray  # n x d
    q: np.ndarray  # L x 2d
    w1: np.ndarray  # L x d x d
    w2: np.ndarray  # L x d x d

    @classmethod
    def init(cls, n_users, n_items, dim, layers, rng, init_std=0.01, dtype=np.float64):
        n_att = max(layers, 1)
        glorot = np.sqrt(6.0 / (2 * dim))
        return cls(
            user_e0=rng.normal(0, init_std, (n_users, dim)).astype(dtype),
            item_e0=rng.normal(0, init_std, (n_items, dim)).astype(dtype),
            q=rng.uniform(-glorot, glorot, (n_att, 2 * dim)).astype(dtype),
            w1=rng.uniform(-glorot, glorot, (n_att, dim, dim)).astype(dtype),
            w2=rng.uniform(-glorot, glorot, (n_att, dim, dim)).astype(dtype),
        )

    def arrays(self) -> dict:
        return {f"d.{f.name}": getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "DiscriminatorParams":
        return DiscriminatorParams(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    @property
    def dim(self) -> int:
        return self.user_e0.shape[1]


def on_tape(tape: Tape, params: DiscriminatorParams) -> dict:
    return {name[2:]: tape.param(name, arr) for name, arr in params.arrays().items()}


def consts_on_tape(tape: Tape, params: DiscriminatorParams) -> dict:
    return {name[2:]: tape.const(arr) for name, arr in params.arrays().items()}


def interaction_norm(y: SparseMatrix) -> SparseMatrix:
    """Weights ``1 / sqrt(deg(u) deg(i))`` on every observed user-item pair."""
    du = np.diff(y.row_offsets).astype(np.float64)
    di = np.bincount(y.col_indices, minlength=y.n_cols).astype(np.float64)
    w = 1.0 / np.sqrt(du[y.row_indices()] * di[y.col_indices])
    return SparseMatrix(y.n_rows, y.n_cols, y.row_offsets, y.col_indices, w)


class InteractionGraph:
    """Normalised bipartite operators built once from the training feedback."""

    def __init__(self, y: SparseMatrix, dtype=np.float64):
        norm = interaction_norm(y).to_scipy().astype(dtype)
        self.user_from_items = norm.tocsr()
        self.item_from_users = norm.T.tocsr()
        self.n_users, self.n_items = y.shape


@dataclass
class PropagationState:
    user_layers: list
    item_layers: list
    user_star: np.ndarray
    item_star: np.ndarray
    attention: list  # per-layer (m, k) weights, empty without a social term


def _layer_param(tape: Tape, stacked: Var, layer: int) -> Var:
    return tape.reshape(tape.gather(stacked, np.array([layer])), stacked.shape[1:])


def attention_tape(
    tape: Tape,
    users_l: Var,
    table: np.ndarray,
    p: dict,
    layer: int,
    context: Optional[Var] = None,
) -> Var:
    """Attention weights ``(m, k)`` over each user's padded neighbour table."""
    mask = table >= 0
    safe = np.where(mask, table, 0)
    d = users_l.shape[1]
    w1 = _layer_param(tape, p["w1"], layer)
    q = _layer_param(tape, p["q"], layer)
    # W1 (e_u + e_v) = W1 e_u + W1 e_v: project each user once, then pair up
    proj = users_l @ w1.T
    hidden = tape.sigmoid(tape.reshape(proj, (proj.shape[0], 1, d)) + tape.gather(proj, safe))
    if context is None:
        q_user = tape.gather(q, np.arange(d))
        scores = hidden @ q_user
    else:
        w2 = _layer_param(tape, p["w2"], layer)
        ctx = tape.sigmoid(context @ w2.T)
        k = table.shape[1]
        ctx = tape.reshape(ctx, (ctx.shape[0], 1, d)) * tape.const(np.ones((1, k, 1), dtype=ctx.value.dtype))
        scores = tape.concat([hidden, ctx], axis=-1) @ q
    return tape.softmax(scores, axis=-1, mask=mask)


def uniform_attention(table: np.ndarray, dtype=np.float64) -> np.ndarray:
    mask = (table >= 0).astype(dtype)
    count = mask.sum(axis=1, keepdims=True)
    return np.divide(mask, count, out=np.zeros_like(mask), where=count > 0)


def propagate_tape(
    tape: Tape,
    p: dict,
    graph: InteractionGraph,
    layers: int,
    table: Optional[np.ndarray] = None,
    attention: bool = True,
    context_items: Optional[np.ndarray] = None,
    trace: Optional[list] = None,
):
    """Run ``layers`` propagation steps; returns ``(user_star, item_star, attention)``.

    ``table`` is an ``(m, k)`` neighbour table padded with -1; ``None`` or a
    table without entries disables the social term.  When ``trace`` is a
    list, the per-layer ``(users, items)`` variables are appended to it.
    """
    if layers < 0:
        raise InputError("number of layers must be non-negative")
    social = table is not None and table.size > 0 and bool(np.any(table >= 0))
    users_l, items_l = p["user_e0"], p["item_e0"]
    user_sum, item_sum = users_l, items_l
    weights_per_layer = []
    if trace is not None:
        trace.append((users_l, items_l))
    for layer in range(layers):
        next_users = tape.spmm(graph.user_from_items, items_l)
        next_items = tape.spmm(graph.item_from_users, users_l)
        if social:
            if attention:
                context = None
                if context_items is not None:
                    context = tape.gather(items_l, context_items)
                w = attention_tape(tape, users_l, table, p, layer, context)
            else:
                w = tape.const(uniform_attention(table, users_l.value.dtype))
            weights_per_layer.append(w)
            nb = tape.gather(users_l, np.where(table >= 0, table, 0))
            w3 = tape.reshape(w, (w.shape[0], w.shape[1], 1))
            next_users = next_users + tape.sum(w3 * nb, axis=1)
        users_l, items_l = next_users, next_items
        if trace is not None:
            trace.append((users_l, items_l))
        user_sum = user_sum + users_l
        item_sum = item_sum + items_l
    scale = 1.0 / (layers + 1)
    return user_sum * scale, item_sum * scale, weights_per_layer


def propagate(
    params: DiscriminatorParams,
    graph: InteractionGraph,
    layers: int,
    table: Optional[np.ndarray] = None,
    attention: bool = True,
    context_items: Optional[np.ndarray] = None,
) -> PropagationState:
    tape = Tape()
    p = consts_on_tape(tape, params)
    trace = []
    users_star, items_star, weights = propagate_tape(
        tape, p, graph, layers, table, attention, context_items, trace
    )
    return PropagationState(
        [u.value for u, _ in trace],
        [i.value for _, i in trace],
        users_star.value,
        items_star.value,
        [w.value for w in weights],
    )


def attention_weights(
    user: int,
    neighbors,
    context_item: int,
    layer: int,
    state: PropagationState,
    params: DiscriminatorParams,
) -> Optional[np.ndarray]:
    """Attention over ``neighbors`` of ``user`` at ``layer`` for one context item.

    Evaluates the full concatenated score directly.  Returns ``None`` when the
    neighbourhood is empty (no social propagation for this user).
    """
    neighbors = np.asarray(neighbors, dtype=np.int64)
    if neighbors.size == 0:
        return None
    eu = state.user_layers[layer][user]
    ei = state.item_layers[layer][context_item]
    w1, w2, q = params.w1[layer], params.w2[layer], params.q[layer]
    item_part = 1.0 / (1.0 + np.exp(-(w2 @ ei)))
    scores = np.empty(neighbors.size)
    for slot, v in enumerate(neighbors):
        user_part = 1.0 / (1.0 + np.exp(-(w1 @ (eu + state.user_layers[layer][v]))))
        scores[slot] = q @ np.concatenate([user_part, item_part])
    scores -= scores.max()
    e = np.exp(scores)
    return e / e.sum()


def score(state: PropagationState, user: int, item: int) -> float:
    return float(state.user_star[user] @ state.item_star[item])


def bpr_loss_tape(
    tape: Tape,
    user_star: Var,
    item_star: Var,
    p: dict,
    users,
    pos,
    neg,
    reg: float,
) -> Var:
    """Batch mean of ``-log sigmoid(y_ui - y_uj)`` plus L2 on the involved parameters.

    The penalty covers the layer-0 rows of the batch's users and items and
    the attention parameters, all divided by the batch size.
    """
    users, pos, neg = (np.asarray(x) for x in (users, pos, neg))
    eu = tape.gather(user_star, users)
    gap = tape.dot(eu, tape.gather(item_star, pos)) - tape.dot(eu, tape.gather(item_star, neg))
    loss = -tape.sum(tape.log_sigmoid(gap))
    if reg:
        penalty = (
            tape.sum(tape.square(tape.gather(p["user_e0"], users)))
            + tape.sum(tape.square(tape.gather(p["item_e0"], pos)))
            + tape.sum(tape.square(tape.gather(p["item_e0"], neg)))
            + tape.sum(tape.square(p["q"]))
            + tape.sum(tape.square(p["w1"]))
            + tape.sum(tape.square(p["w2"]))
        )
        loss = loss + penalty * reg
    return loss * (1.0 / len(users))


def bpr_value(gaps, reg_term: float = 0.0) -> float:
    """``sum(-log sigmoid(gap)) + reg_term`` for precomputed score gaps."""
    gaps = np.asarray(gaps, dtype=np.float64)
    return float(np.sum(np.logaddexp(0, -gaps)) + reg_term)


def adversarial_tape(
    tape: Tape,
    user_star: Var,
    item_star: Var,
    users,
    pos,
    mixture: Var,
    rows=None,
) -> Var:
    """Batch mean of ``-log sigmoid(y_ui - y_u'i)``.

    ``mixture`` is ``(B', m)``: each row a convex combination over users (the
    mean of a user's concrete rows); ``rows`` maps every triple to its row
    (defaults to the identity).  The generated neighbour's embedding is
    ``mixture @ user_star``.
    """
    users, pos = np.asarray(users), np.asarray(pos)
    rows = np.arange(len(users)) if rows is None else np.asarray(rows)
    ei = tape.gather(item_star, pos)
    fake = tape.gather(mixture @ user_star, rows)
    gap = tape.dot(tape.gather(user_star, users), ei) - tape.dot(fake, ei)
    return -tape.sum(tape.log_sigmoid(gap)) * (1.0 / len(users))


def adversarial_pair_loss(user: int, item: int, v: np.ndarray, state: PropagationState) -> float:
    """Adversarial loss of one (user, positive item) pair for concrete rows ``v`` (k x m)."""
    mixture = np.asarray(v, dtype=np.float64).mean(axis=0)
    fake = mixture @ state.user_star
    gap = state.user_star[user] @ state.item_star[item] - fake @ state.item_star[item]
    return float(np.logaddexp(0, -gap))
