"""Motif-based GCN generator: relaxed neighbour selection and profile decoding.

Tape-level builders take :class:`~esrf.numerics.Var` inputs so the same code
serves training, gradient checking and plain inference.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import InputError
from .numerics import Tape, Var, gumbel_sample
from .sparse import SparseMatrix

LOG_FLOOR = 1e-10


@dataclass
class GeneratorParams:
    e0: np.ndarray  # m x d
    h: np.ndarray  # k x m
    w1: np.ndarray  # m x t
    b1: np.ndarray  # t
    w2: np.ndarray  # t x m
    b2: np.ndarray  # m

    @classmethod
    def init(cls, n_users, dim, k, hidden, rng, init_std=0.1, dtype=np.float64):
        if k < 1 or dim < 1:
            raise InputError("k and d must be at least 1")
        glorot = np.sqrt(6.0 / (n_users + hidden))
        return cls(
            e0=rng.normal(0, init_std, (n_users, dim)).astype(dtype),
            h=(1.0 + rng.normal(0, 0.1, (k, n_users))).astype(dtype),
            w1=rng.uniform(-glorot, glorot, (n_users, hidden)).astype(dtype),
            b1=np.zeros(hidden, dtype=dtype),
            w2=rng.uniform(-glorot, glorot, (hidden, n_users)).astype(dtype),
            b2=np.zeros(n_users, dtype=dtype),
        )

    def arrays(self) -> dict:
        return {f"g.{f.name}": getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    @property
    def k(self) -> int:
        return self.h.shape[0]


def on_tape(tape: Tape, params: GeneratorParams) -> dict:
    return {name[2:]: tape.param(name, arr) for name, arr in params.arrays().items()}


@dataclass(frozen=True)
class RelaxedSelection:
    """Concrete samples: ``v`` is ``(k, m)`` for one user or ``(B, k, m)`` for a batch."""

    v: np.ndarray
    tau: float


@dataclass(frozen=True)
class AlternativeNeighborhood:
    user: int
    neighbors: np.ndarray
    weights: np.ndarray


def _as_scipy(adj) -> sp.csr_matrix:
    return adj.to_scipy() if isinstance(adj, SparseMatrix) else sp.csr_matrix(adj)


def propagate_tape(tape: Tape, adj: sp.csr_matrix, e0: Var, layers: int) -> Var:
    """Layer-mean of ``E, A E, A^2 E, ...`` with no transform or nonlinearity."""
    if layers < 0:
        raise InputError("number of layers must be non-negative")
    current = e0
    total = e0
    for _ in range(layers):
        current = tape.spmm(adj, current)
        total = total + current
    return total * (1.0 / (layers + 1))


def propagate(normalized, params: GeneratorParams, layers: int) -> np.ndarray:
    tape = Tape()
    e = propagate_tape(tape, _as_scipy(normalized).astype(params.e0.dtype), tape.const(params.e0), layers)
    return e.value


def selector_scores_tape(tape: Tape, e: Var, h: Var, users: np.ndarray) -> Var:
    """Selector logits ``(E e_u^T) * h_i`` for each batch user and neuron: ``(B, k, m)``."""
    users = np.asarray(users)
    sim = tape.gather(e, users) @ e.T
    m = e.shape[0]
    return tape.reshape(sim, (len(users), 1, m)) * tape.reshape(h, (1, h.shape[0], m))


def selector_tape(tape: Tape, e: Var, h: Var, users: np.ndarray) -> Var:
    """``softmax((E e_u^T) * h_i)`` over all users, for each neuron i: ``(B, k, m)``."""
    return tape.softmax(selector_scores_tape(tape, e, h, users), axis=-1)


def selector_logits(e: np.ndarray, h: np.ndarray, user: int) -> np.ndarray:
    """The ``(k, m)`` row-stochastic selector distribution of one user."""
    tape = Tape()
    return selector_tape(tape, tape.const(e), tape.const(h), np.array([user])).value[0]


def masked_log_alpha(tape: Tape, log_alpha: Var, users: np.ndarray, floor: float = LOG_FLOOR) -> Var:
    """``log(alpha)`` floored at ``log(floor)``, each user's own column pinned to the floor."""
    users = np.asarray(users)
    b, _, m = log_alpha.shape
    own = np.zeros((b, 1, m), dtype=bool)
    own[np.arange(b), 0, users] = True
    return tape.fill(tape.clip_below(log_alpha, np.log(floor)), own, np.log(floor))


def concrete_tape(tape: Tape, log_alpha: Var, noise, tau: float) -> Var:
    """Concrete relaxation ``softmax((log alpha + g) / tau)`` along the last axis."""
    if tau <= 0:
        raise InputError("temperature must be positive")
    return tape.softmax((log_alpha + tape.lift(noise, log_alpha)) * (1.0 / tau), axis=-1)


def select_neighborhood(
    alpha: np.ndarray,
    tau: float,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
    floor: float = LOG_FLOOR,
) -> RelaxedSelection:
    """Sample concrete rows for a ``(k, m)`` (or batched) selector distribution.

    Pass ``noise`` to fix the Gumbel draws; otherwise ``rng`` supplies them.
    """
    if tau <= 0:
        raise InputError("temperature must be positive")
    alpha = np.asarray(alpha, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise InputError("either rng or noise is required")
        noise = gumbel_sample(alpha.shape, rng)
    tape = Tape()
    v = concrete_tape(tape, tape.log(tape.const(alpha), floor=floor), noise, tau)
    return RelaxedSelection(v.value, tau)


def harden_rows(v: np.ndarray, user: int) -> AlternativeNeighborhood:
    """Argmax per neuron, duplicates merged with summed weight, the user dropped."""
    picks = np.argmax(v, axis=-1)
    picks = picks[picks != user]
    if picks.size == 0:
        return AlternativeNeighborhood(user, np.zeros(0, dtype=np.int64), np.zeros(0))
    ids, counts = np.unique(picks, return_counts=True)
    return AlternativeNeighborhood(user, ids.astype(np.int64), counts / counts.sum())


def harden(selection: RelaxedSelection, user: int) -> AlternativeNeighborhood:
    return harden_rows(selection.v, user)


def decode_tape(tape: Tape, v: Var, p: dict) -> Var:
    """Sum the k concrete rows, then hidden ReLU layer and linear output layer."""
    profile = tape.sum(v, axis=-2)
    hidden = tape.relu(profile @ p["w1"] + p["b1"])
    return hidden @ p["w2"] + p["b2"]


def decode(selection: RelaxedSelection, params: GeneratorParams) -> np.ndarray:
    tape = Tape()
    p = {k: tape.const(getattr(params, k)) for k in ("w1", "b1", "w2", "b2")}
    return decode_tape(tape, tape.const(selection.v), p).value


def reconstruction_loss_tape(tape: Tape, recon: Var, target) -> Var:
    target = tape.lift(target, recon)
    if recon.shape != target.shape:
        raise InputError(f"shape mismatch: {recon.shape} vs {target.shape}")
    return tape.sum(tape.square(recon - target))


def reconstruction_loss(recon, target) -> float:
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if recon.shape != target.shape:
        raise InputError(f"shape mismatch: {recon.shape} vs {target.shape}")
    return float(np.sum((recon - target) ** 2))


class Generator:
    """Parameters plus the fixed graph operands needed to generate neighbourhoods."""

    def __init__(self, params: GeneratorParams, adjacency, layers: int, tau: float, floor=LOG_FLOOR):
        if tau <= 0:
            raise InputError("temperature must be positive")
        self.params = params
        self.adj = _as_scipy(adjacency).astype(params.e0.dtype)
        self.layers = layers
        self.tau = tau
        self.floor = floor

    @property
    def n_users(self) -> int:
        return self.params.e0.shape[0]

    @property
    def k(self) -> int:
        return self.params.k

    def noise(self, n_users: int, rng: np.random.Generator) -> np.ndarray:
        return gumbel_sample((n_users, self.k, self.n_users), rng, dtype=self.params.e0.dtype)

    def relaxed_tape(self, tape: Tape, p: dict, users, noise) -> Var:
        e = propagate_tape(tape, self.adj, p["e0"], self.layers)
        log_alpha = tape.log_softmax(selector_scores_tape(tape, e, p["h"], users), axis=-1)
        return concrete_tape(tape, masked_log_alpha(tape, log_alpha, users, self.floor), noise, self.tau)

    def relaxed(self, users, noise) -> np.ndarray:
        tape = Tape()
        p = {k: tape.const(v) for k, v in (("e0", self.params.e0), ("h", self.params.h))}
        return self.relaxed_tape(tape, p, np.asarray(users), noise).value

    def neighborhoods(self, users, rng, chunk: int = 128) -> list:
        """Hard neighbourhoods for ``users`` using fresh noise, ``chunk`` users at a time."""
        users = np.asarray(users, dtype=np.int64)
        out = []
        for lo in range(0, len(users), chunk):
            part = users[lo : lo + chunk]
            v = self.relaxed(part, self.noise(len(part), rng))
            out += [harden_rows(v[b], int(u)) for b, u in enumerate(part)]
        return out


def neighbor_table(neighborhoods, n_users: int, k: int) -> np.ndarray:
    """Pack neighbourhoods into an ``(m, k)`` index table padded with -1."""
    table = np.full((n_users, k), -1, dtype=np.int64)
    for nb in neighborhoods:
        table[nb.user, : len(nb.neighbors)] = nb.neighbors
    return table


def random_neighbor_table(n_users: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """k distinct uniformly random other users per user (fewer if m - 1 < k)."""
    width = min(k, n_users - 1)
    table = np.full((n_users, k), -1, dtype=np.int64)
    for u in range(n_users):
        pick = rng.choice(n_users - 1, size=width, replace=False)
        table[u, :width] = np.sort(pick + (pick >= u))
    return table
