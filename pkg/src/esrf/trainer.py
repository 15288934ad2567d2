"""Pretraining, adversarial alternation and checkpointing.

The discriminator (attentive ranking GCN) and the generator (motif GCN with
a concrete selector) are trained in three stages: the discriminator alone on
the ranking loss with no social term, the generator alone on profile
reconstruction, then alternating epochs in which every batch regenerates the
batch users' neighbourhoods, takes a discriminator step on
``L_r + beta * L_adv`` and a generator step ascending ``beta * L_adv``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import discriminator as disc
from . import generator as gen
from .data import InteractionLog, SocialLog
from .errors import ConfigError, InputError, TrainingAborted
from .evaluation import EmbeddingScorer, evaluate_split
from .numerics import AdamState, Tape, adam_step, value_and_grad
from .sparse import SparseMatrix, build_motif_set, motif_adjacency, row_normalize

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainingConfig:
    dim: int = 50
    layers: int = 4
    k: int = 40
    tau: float = 0.2
    beta: float = 0.3
    reg: float = 0.005
    gen_reg: Optional[float] = None  # defaults to reg
    learning_rate: float = 0.001
    gen_learning_rate: Optional[float] = None  # defaults to learning_rate
    batch_size: int = 512
    gen_batch_size: int = 128
    hidden: int = 64
    init_std: float = 0.01
    gen_init_std: float = 0.1
    pretrain_epochs_d: int = 30
    pretrain_epochs_g: int = 10
    adversarial_epochs: int = 10
    baseline_epochs: int = 200
    patience: int = 5
    g_steps_per_d: int = 1
    fine_tune: str = "epoch"  # epoch | batch | none
    ls_scope: str = "nonempty"  # nonempty | all
    binarize_motifs: bool = False
    binarize_target: bool = False
    no_motif: bool = False
    no_denoise: bool = False
    no_attention: bool = False
    no_adversarial: bool = False
    random_neighbors: bool = False
    eval_n: int = 10
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> "TrainingConfig":
        positive = ("dim", "k", "batch_size", "gen_batch_size", "hidden", "eval_n", "g_steps_per_d")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.layers < 0:
            raise ConfigError("layers must be non-negative")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        for name in ("beta", "reg", "learning_rate", "init_std", "gen_init_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.learning_rate == 0:
            raise ConfigError("learning_rate must be positive")
        for name in ("pretrain_epochs_d", "pretrain_epochs_g", "adversarial_epochs", "baseline_epochs", "patience"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.fine_tune not in ("epoch", "batch", "none"):
            raise ConfigError(f"fine_tune must be epoch, batch or none, got {self.fine_tune!r}")
        if self.ls_scope not in ("nonempty", "all"):
            raise ConfigError(f"ls_scope must be nonempty or all, got {self.ls_scope!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.random_neighbors and self.beta > 0 and not self.no_adversarial:
            raise ConfigError("random_neighbors requires adversarial training off (no_adversarial or beta = 0)")
        return self

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def effective_beta(self) -> float:
        return 0.0 if self.no_adversarial else self.beta

    @property
    def effective_gen_reg(self) -> float:
        return self.reg if self.gen_reg is None else self.gen_reg

    @property
    def effective_gen_lr(self) -> float:
        return self.learning_rate if self.gen_learning_rate is None else self.gen_learning_rate

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in fields(cls)}


@dataclass
class EpochRecord:
    epoch: int
    l_r: Optional[float] = None
    l_s: Optional[float] = None
    l_adv: Optional[float] = None
    val_prec10: Optional[float] = None


@dataclass
class TrainingHistory:
    records: list = field(default_factory=list)

    def add(self, record: EpochRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_tsv(self) -> str:
        def fmt(x):
            return "NA" if x is None else repr(float(x))

        lines = ["epoch\tL_r\tL_s\tL_adv\tval_prec10"]
        for r in self.records:
            lines.append("\t".join([str(r.epoch), fmt(r.l_r), fmt(r.l_s), fmt(r.l_adv), fmt(r.val_prec10)]))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_tsv())


def _check_finite(value: float, what: str, epoch: int, batch: Optional[int] = None) -> None:
    if not np.isfinite(value):
        where = f"epoch {epoch}" + ("" if batch is None else f", batch {batch}")
        raise TrainingAborted(f"non-finite {what} at {where}")


def sample_triples(train: InteractionLog, rng: np.random.Generator, size: Optional[int] = None):
    """``(users, positives, negatives)`` arrays for one pass of BPR training.

    Without ``size`` every observed positive appears once, in random order;
    otherwise ``size`` positives are drawn with replacement.  Negatives are
    uniform over the items the user has not interacted with.  Users who have
    interacted with every item are skipped with a warning.
    """
    pos_pairs = train.positives
    n = train.n_items
    counts = train.user_counts()
    full = np.flatnonzero(counts >= n)
    if full.size:
        warnings.warn(f"{full.size} user(s) interacted with every item and are skipped", stacklevel=2)
        pos_pairs = pos_pairs[counts[pos_pairs[:, 0]] < n]
    if len(pos_pairs) == 0:
        raise InputError("no trainable positives")
    if size is None:
        order = rng.permutation(len(pos_pairs))
    else:
        order = rng.integers(0, len(pos_pairs), size=size)
    users = pos_pairs[order, 0]
    pos = pos_pairs[order, 1]
    keys = train.positives[:, 0] * n + train.positives[:, 1]  # sorted
    neg = rng.integers(0, n, size=len(users))
    bad = np.arange(len(users))
    while bad.size:
        probe = users[bad] * n + neg[bad]
        at = np.searchsorted(keys, probe)
        hit = (at < len(keys)) & (keys[np.minimum(at, len(keys) - 1)] == probe)
        bad = bad[hit]
        neg[bad] = rng.integers(0, n, size=bad.size)
    return users, pos, neg


class EarlyStopping:
    """Tracks the best validation score and its snapshot.

    ``update`` returns True once ``patience`` consecutive epochs fail to
    improve on the best score (``patience = 0`` never stops).
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.snapshot = None
        self.stale = 0

    def update(self, score: Optional[float], take_snapshot) -> bool:
        if score is None:
            return False
        if score > self.best:
            self.best, self.snapshot, self.stale = score, take_snapshot(), 0
            return False
        self.stale += 1
        return bool(self.patience) and self.stale >= self.patience


def _batches(count: int, size: int):
    for lo in range(0, count, size):
        yield slice(lo, min(lo + size, count))


@dataclass
class EsrfModel:
    """Trained parameters plus the fixed graph operands needed for scoring."""

    config: TrainingConfig
    graph: disc.InteractionGraph
    d_params: disc.DiscriminatorParams
    g_params: Optional[gen.GeneratorParams] = None
    table: Optional[np.ndarray] = None
    trained: bool = False

    @property
    def n_items(self) -> int:
        return self.graph.n_items

    @property
    def attention(self) -> bool:
        return not self.config.no_attention

    def state(self) -> disc.PropagationState:
        return disc.propagate(self.d_params, self.graph, self.config.layers, self.table, self.attention)

    def scorer(self) -> EmbeddingScorer:
        s = self.state()
        return EmbeddingScorer(s.user_star, s.item_star)

    def snapshot(self) -> tuple:
        return (
            self.d_params.copy(),
            None if self.g_params is None else self.g_params.copy(),
            None if self.table is None else self.table.copy(),
        )

    def restore(self, snap: tuple) -> None:
        """Copy snapshot values back into the live parameter arrays."""
        d, g, table = snap
        for name, arr in self.d_params.arrays().items():
            np.copyto(arr, d.arrays()[name])
        if g is not None:
            for name, arr in self.g_params.arrays().items():
                np.copyto(arr, g.arrays()[name])
        self.table = None if table is None else table.copy()


class Trainer:
    """Holds the data operands, optimiser states and random streams of one run."""

    def __init__(
        self,
        train: InteractionLog,
        social: Optional[SocialLog],
        config: TrainingConfig,
        validation: Optional[InteractionLog] = None,
        use_generator: bool = True,
    ):
        self.cfg = config.validate()
        self.train = train
        self.validation = validation if validation is not None and len(validation) else None
        dtype = self.cfg.np_dtype
        init_ss, sample_ss, noise_ss, table_ss = np.random.SeedSequence(self.cfg.seed).spawn(4)
        init_rng = np.random.default_rng(init_ss)
        self.sample_rng = np.random.default_rng(sample_ss)
        self.noise_rng = np.random.default_rng(noise_ss)
        self.table_rng = np.random.default_rng(table_ss)
        m, n = train.n_users, train.n_items
        graph = disc.InteractionGraph(train.y, dtype)
        d_params = disc.DiscriminatorParams.init(m, n, self.cfg.dim, self.cfg.layers, init_rng, self.cfg.init_std, dtype)
        self.model = EsrfModel(self.cfg, graph, d_params)
        self.d_opt = AdamState(learning_rate=self.cfg.learning_rate)
        self.g_opt = AdamState(learning_rate=self.cfg.effective_gen_lr)
        self.history = TrainingHistory()
        self.epoch = 0
        self.generator: Optional[gen.Generator] = None
        self.targets: Optional[SparseMatrix] = None
        if use_generator and not self.cfg.random_neighbors:
            if social is None:
                raise InputError("the generator needs a social relation matrix")
            if social.s.shape != (m, m):
                raise InputError(f"social matrix shape {social.s.shape} does not match {m} users")
            self._build_generator(social.s, init_rng)

    # -- setup --------------------------------------------------------------
    def _build_generator(self, s: SparseMatrix, rng) -> None:
        cfg = self.cfg
        y = self.train.y
        if cfg.no_motif:
            m8 = motif_adjacency(s, y, "M8")
            adjacency = row_normalize(s)
        else:
            motif_set = build_motif_set(s, y, binarize=cfg.binarize_motifs)
            m8 = motif_set.motif_matrices["M8"]
            adjacency = motif_set.normalized
        self.targets = m8.binarize() if cfg.binarize_target else m8
        params = gen.GeneratorParams.init(
            self.train.n_users, cfg.dim, cfg.k, cfg.hidden, rng, cfg.gen_init_std, cfg.np_dtype
        )
        self.generator = gen.Generator(params, adjacency, cfg.layers, cfg.tau)
        self.model.g_params = params
        if cfg.ls_scope == "nonempty":
            self.ls_users = np.flatnonzero(np.diff(self.targets.row_offsets) > 0)
        else:
            self.ls_users = np.arange(self.train.n_users)

    def _target_rows(self, users) -> np.ndarray:
        return self.targets.to_scipy()[users].toarray().astype(self.cfg.np_dtype)

    # -- evaluation ---------------------------------------------------------
    def validate_now(self) -> Optional[float]:
        if self.validation is None:
            return None
        return evaluate_split(self.model.scorer(), self.train, self.validation, n=self.cfg.eval_n).precision

    # -- discriminator ------------------------------------------------------
    def d_step(self, users, pos, neg, table=None, mixture=None, rows=None, beta: float = 0.0):
        """One Adam step on ``L_r (+ beta * L_adv)``; returns ``(L_r, L_adv)`` before the step."""
        cfg = self.cfg
        tape = Tape()
        p = disc.on_tape(tape, self.model.d_params)
        us, its, _ = disc.propagate_tape(tape, p, self.model.graph, cfg.layers, table, not cfg.no_attention)
        l_r = disc.bpr_loss_tape(tape, us, its, p, users, pos, neg, cfg.reg)
        loss = l_r
        l_adv = None
        if mixture is not None:
            l_adv = disc.adversarial_tape(tape, us, its, users, pos, tape.const(mixture), rows)
            if beta:
                loss = loss + l_adv * beta
        _, grads = value_and_grad(tape, loss)
        adam_step(self.model.d_params.arrays(), grads, self.d_opt)
        return float(l_r.value), None if l_adv is None else float(l_adv.value)

    def fit_discriminator(self, epochs: int, table=None, patience: Optional[int] = None) -> None:
        """Ranking-loss training with early stopping on validation precision.

        With ``table=None`` the social term is absent and the model is a
        light graph convolution over the interaction graph.
        """
        stopper = EarlyStopping(self.cfg.patience if patience is None else patience)
        for _ in range(epochs):
            self.epoch += 1
            users, pos, neg = sample_triples(self.train, self.sample_rng)
            total = 0.0
            for b, sl in enumerate(_batches(len(users), self.cfg.batch_size)):
                l_r, _ = self.d_step(users[sl], pos[sl], neg[sl], table)
                _check_finite(l_r, "L_r", self.epoch, b)
                total += l_r * (sl.stop - sl.start)
            val = self.validate_now()
            self.history.add(EpochRecord(self.epoch, l_r=total / len(users), val_prec10=val))
            log.info("epoch %d L_r %.5f val %s", self.epoch, total / len(users), val)
            if stopper.update(val, self.model.snapshot):
                break
        if stopper.snapshot is not None:
            self.model.restore(stopper.snapshot)

    # -- generator ----------------------------------------------------------
    def ls_step(self, users) -> float:
        """One Adam step on the batch-mean reconstruction loss; returns the pre-step loss per row."""
        g = self.generator
        tape = Tape()
        p = gen.on_tape(tape, g.params)
        noise = g.noise(len(users), self.noise_rng)
        v = g.relaxed_tape(tape, p, users, noise)
        recon = gen.decode_tape(tape, v, p)
        loss = gen.reconstruction_loss_tape(tape, recon, self._target_rows(users)) * (1.0 / len(users))
        reg = self.cfg.effective_gen_reg
        if reg:
            loss = loss + tape.sum(tape.square(tape.gather(p["e0"], users))) * (reg / len(users))
        value, grads = value_and_grad(tape, loss)
        adam_step(g.params.arrays(), grads, self.g_opt)
        return value

    def pretrain_generator(self, epochs: int) -> None:
        if self.generator is None or self.cfg.no_denoise or self.ls_users.size == 0:
            return
        for _ in range(epochs):
            self.epoch += 1
            order = self.sample_rng.permutation(self.ls_users)
            total = 0.0
            for b, sl in enumerate(_batches(len(order), self.cfg.gen_batch_size)):
                value = self.ls_step(order[sl])
                _check_finite(value, "L_s", self.epoch, b)
                total += value * (sl.stop - sl.start)
            self.history.add(EpochRecord(self.epoch, l_s=total / len(order)))
            log.info("epoch %d L_s %.5f", self.epoch, total / len(order))

    def generate_batch(self, batch_users, noise, record: bool):
        """Relaxed rows ``(U, k, m)`` for the batch users, chunk by chunk.

        With ``record`` the per-chunk tapes (generator parameters as leaves)
        are returned as well so a later generator step can reuse them.
        """
        g = self.generator
        if not record:
            parts = [g.relaxed(batch_users[sl], noise[sl]) for sl in _batches(len(batch_users), self.cfg.gen_batch_size)]
            return np.concatenate(parts, axis=0), None
        parts, chunks = [], []
        for sl in _batches(len(batch_users), self.cfg.gen_batch_size):
            tape = Tape()
            p = gen.on_tape(tape, g.params)
            v = g.relaxed_tape(tape, p, batch_users[sl], noise[sl])
            parts.append(v.value)
            chunks.append((sl, tape, p, v))
        return np.concatenate(parts, axis=0), chunks

    def g_step(self, batch_users, rows, users, pos, chunks, beta: float) -> None:
        """Ascend ``beta * L_adv`` over the generator with the discriminator frozen.

        ``chunks`` come from :meth:`generate_batch`.  Gradients are summed over
        chunks in a fixed order, then applied in one Adam step.
        """
        state = self.model.state()
        total_grads: dict = {}
        b = len(users)
        reg = self.cfg.effective_gen_reg
        for sl, tape, p, v in chunks:
            sel = (rows >= sl.start) & (rows < sl.stop)
            adv = disc.adversarial_tape(
                tape,
                tape.const(state.user_star),
                tape.const(state.item_star),
                users[sel],
                pos[sel],
                tape.mean(v, axis=1),
                rows[sel] - sl.start,
            )
            objective = adv * (-beta * sel.sum() / b)
            if reg:
                objective = objective + tape.sum(tape.square(tape.gather(p["e0"], batch_users[sl]))) * (reg / b)
            _, grads = value_and_grad(tape, objective)
            for name, grad in grads.items():
                total_grads[name] = grad if name not in total_grads else total_grads[name] + grad
        adam_step(self.generator.params.arrays(), total_grads, self.g_opt)

    def regenerate_all(self) -> np.ndarray:
        m = self.train.n_users
        hoods = self.generator.neighborhoods(np.arange(m), self.noise_rng, self.cfg.gen_batch_size)
        return gen.neighbor_table(hoods, m, self.cfg.k)

    # -- adversarial --------------------------------------------------------
    def adversarial_epoch(self) -> EpochRecord:
        cfg = self.cfg
        model = self.model
        self.epoch += 1
        beta = cfg.effective_beta
        adversarial = self.generator is not None and not cfg.no_adversarial
        users, pos, neg = sample_triples(self.train, self.sample_rng)
        sums = {"l_r": 0.0, "l_adv": 0.0, "l_s": 0.0}
        ls_steps = 0
        for b, sl in enumerate(_batches(len(users), cfg.batch_size)):
            bu, bp, bn = users[sl], pos[sl], neg[sl]
            mixture = rows = None
            if adversarial:
                batch_users, rows = np.unique(bu, return_inverse=True)
                noise = self.generator.noise(len(batch_users), self.noise_rng)
                v, chunks = self.generate_batch(batch_users, noise, record=bool(beta))
                for r, u in enumerate(batch_users):
                    hood = gen.harden_rows(v[r], int(u))
                    model.table[u] = -1
                    model.table[u, : len(hood.neighbors)] = hood.neighbors
                mixture = v.mean(axis=1)
            l_r, l_adv = self.d_step(bu, bp, bn, model.table, mixture, rows, beta)
            _check_finite(l_r, "L_r", self.epoch, b)
            sums["l_r"] += l_r * len(bu)
            if l_adv is not None:
                _check_finite(l_adv, "L_adv", self.epoch, b)
                sums["l_adv"] += l_adv * len(bu)
            if adversarial and beta:
                for step in range(cfg.g_steps_per_d):
                    if step:
                        _, chunks = self.generate_batch(batch_users, noise, record=True)
                    self.g_step(batch_users, rows, bu, bp, chunks, beta)
                chunks = None
            if adversarial and cfg.fine_tune == "batch" and not cfg.no_denoise:
                sums["l_s"] += self._fine_tune_once(b)
                ls_steps += 1
        if adversarial:
            if cfg.fine_tune == "epoch" and not cfg.no_denoise:
                sums["l_s"] += self._fine_tune_once(None)
                ls_steps += 1
            model.table = self.regenerate_all()
        val = self.validate_now()
        record = EpochRecord(
            self.epoch,
            l_r=sums["l_r"] / len(users),
            l_s=sums["l_s"] / ls_steps if ls_steps else None,
            l_adv=sums["l_adv"] / len(users) if adversarial else None,
            val_prec10=val,
        )
        self.history.add(record)
        log.info("epoch %d L_r %.5f L_adv %s val %s", self.epoch, record.l_r, record.l_adv, val)
        return record

    def _fine_tune_once(self, batch) -> float:
        if self.ls_users.size == 0:
            return 0.0
        size = min(self.cfg.gen_batch_size, self.ls_users.size)
        users = np.sort(self.sample_rng.choice(self.ls_users, size=size, replace=False))
        value = self.ls_step(users)
        _check_finite(value, "L_s", self.epoch, batch)
        return value

    # -- full schedule --------------------------------------------------------
    def initial_table(self) -> np.ndarray:
        cfg = self.cfg
        m = self.train.n_users
        if cfg.random_neighbors:
            return gen.random_neighbor_table(m, cfg.k, self.table_rng)
        return self.regenerate_all()

    def run(self) -> tuple[EsrfModel, TrainingHistory]:
        cfg = self.cfg
        self.fit_discriminator(cfg.pretrain_epochs_d)
        self.pretrain_generator(cfg.pretrain_epochs_g)
        self.model.table = self.initial_table()
        stopper = EarlyStopping(cfg.patience)
        for _ in range(cfg.adversarial_epochs):
            record = self.adversarial_epoch()
            if stopper.update(record.val_prec10, self.model.snapshot):
                break
        if stopper.snapshot is not None:
            self.model.restore(stopper.snapshot)
        self.model.trained = True
        return self.model, self.history


def train(
    train_log: InteractionLog,
    social: Optional[SocialLog],
    config: TrainingConfig,
    validation: Optional[InteractionLog] = None,
) -> tuple[EsrfModel, TrainingHistory]:
    """Pretrain both networks, then run the adversarial epochs."""
    return Trainer(train_log, social, config, validation).run()


# -- checkpoints ------------------------------------------------------------
def save_checkpoint(path, model: EsrfModel) -> None:
    """Write every parameter tensor to an ``.npz`` archive.

    Keys: ``format_version``, ``config`` (JSON text), ``d.*`` discriminator
    tensors, ``g.*`` generator tensors when present, ``table`` when present.
    """
    arrays = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "config": np.array(json.dumps(asdict(model.config), sort_keys=True)),
        "trained": np.array(model.trained),
    }
    arrays.update(model.d_params.arrays())
    if model.g_params is not None:
        arrays.update(model.g_params.arrays())
    if model.table is not None:
        arrays["table"] = model.table
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, train_log: InteractionLog) -> EsrfModel:
    """Rebuild a model from :func:`save_checkpoint` output and its training log."""
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise InputError(f"unsupported checkpoint version {version}")
        config = TrainingConfig(**json.loads(str(z["config"])))
        d = disc.DiscriminatorParams(**{f.name: z[f"d.{f.name}"] for f in fields(disc.DiscriminatorParams)})
        g = None
        if "g.e0" in z:
            g = gen.GeneratorParams(**{f.name: z[f"g.{f.name}"] for f in fields(gen.GeneratorParams)})
        table = z["table"] if "table" in z else None
        trained = bool(z["trained"])
    if d.user_e0.shape[0] != train_log.n_users or d.item_e0.shape[0] != train_log.n_items:
        raise InputError("checkpoint does not match the training log dimensions")
    graph = disc.InteractionGraph(train_log.y, config.np_dtype)
    return EsrfModel(config, graph, d, g, table, trained)


def with_overrides(config: TrainingConfig, **changes) -> TrainingConfig:
    return replace(config, **changes).validate()
