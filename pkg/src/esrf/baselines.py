"""Reference recommenders trained with the same sampler, optimiser and evaluation.

Light graph convolution is not a separate model: it is the discriminator
trained with no social term, through the exact same trainer code.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import InteractionLog
from .evaluation import EmbeddingScorer, evaluate_split
from .numerics import AdamState, Tape, Var, adam_step, value_and_grad
from .trainer import (
    EarlyStopping,
    EpochRecord,
    EsrfModel,
    Trainer,
    TrainingConfig,
    TrainingHistory,
    _batches,
    _check_finite,
    sample_triples,
)

log = logging.getLogger(__name__)


@dataclass
class MfModel:
    user_emb: np.ndarray
    item_emb: np.ndarray
    trained: bool = False

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0]

    def arrays(self) -> dict:
        return {"mf.user": self.user_emb, "mf.item": self.item_emb}

    def copy(self) -> "MfModel":
        return MfModel(self.user_emb.copy(), self.item_emb.copy(), self.trained)

    def scorer(self) -> EmbeddingScorer:
        return EmbeddingScorer(self.user_emb, self.item_emb)


def mf_loss_tape(tape: Tape, user: Var, item: Var, users, pos, neg, reg: float) -> Var:
    """Batch mean of ``-log sigmoid(e_u.e_i - e_u.e_j)`` plus L2 on the batch rows."""
    eu = tape.gather(user, users)
    ei, ej = tape.gather(item, pos), tape.gather(item, neg)
    loss = -tape.sum(tape.log_sigmoid(tape.dot(eu, ei) - tape.dot(eu, ej)))
    if reg:
        penalty = tape.sum(tape.square(eu)) + tape.sum(tape.square(ei)) + tape.sum(tape.square(ej))
        loss = loss + penalty * reg
    return loss * (1.0 / len(users))


def train_bpr_mf(
    train: InteractionLog,
    config: TrainingConfig,
    validation: Optional[InteractionLog] = None,
    epochs: Optional[int] = None,
) -> tuple[MfModel, TrainingHistory]:
    """Matrix factorisation with pairwise ranking loss and validation early stopping."""
    cfg = config.validate()
    epochs = cfg.baseline_epochs if epochs is None else epochs
    init_ss, sample_ss, _, _ = np.random.SeedSequence(cfg.seed).spawn(4)
    init_rng = np.random.default_rng(init_ss)
    sample_rng = np.random.default_rng(sample_ss)
    dtype = cfg.np_dtype
    model = MfModel(
        init_rng.normal(0, cfg.init_std, (train.n_users, cfg.dim)).astype(dtype),
        init_rng.normal(0, cfg.init_std, (train.n_items, cfg.dim)).astype(dtype),
    )
    opt = AdamState(learning_rate=cfg.learning_rate)
    history = TrainingHistory()
    has_val = validation is not None and len(validation) > 0
    stopper = EarlyStopping(cfg.patience)
    for epoch in range(1, epochs + 1):
        users, pos, neg = sample_triples(train, sample_rng)
        total = 0.0
        for b, sl in enumerate(_batches(len(users), cfg.batch_size)):
            tape = Tape()
            u = tape.param("mf.user", model.user_emb)
            i = tape.param("mf.item", model.item_emb)
            value, grads = value_and_grad(tape, mf_loss_tape(tape, u, i, users[sl], pos[sl], neg[sl], cfg.reg))
            _check_finite(value, "L_r", epoch, b)
            adam_step(model.arrays(), grads, opt)
            total += value * (sl.stop - sl.start)
        val = evaluate_split(model.scorer(), train, validation, n=cfg.eval_n).precision if has_val else None
        history.add(EpochRecord(epoch, l_r=total / len(users), val_prec10=val))
        log.info("mf epoch %d L_r %.5f val %s", epoch, total / len(users), val)
        if stopper.update(val, model.copy):
            break
    if stopper.snapshot is not None:
        np.copyto(model.user_emb, stopper.snapshot.user_emb)
        np.copyto(model.item_emb, stopper.snapshot.item_emb)
    model.trained = True
    return model, history


def train_lightgcn(
    train: InteractionLog,
    config: TrainingConfig,
    validation: Optional[InteractionLog] = None,
    epochs: Optional[int] = None,
) -> tuple[EsrfModel, TrainingHistory]:
    """The discriminator trained on the ranking loss alone, without social propagation."""
    trainer = Trainer(train, None, config, validation, use_generator=False)
    trainer.fit_discriminator(trainer.cfg.baseline_epochs if epochs is None else epochs)
    trainer.model.trained = True
    return trainer.model, trainer.history
