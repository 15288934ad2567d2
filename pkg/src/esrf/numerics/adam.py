from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InputError


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Parameters without an entry in ``grads`` are left alone (their moments
    are not advanced either).
    """
    for name, g in grads.items():
        if name not in params:
            raise InputError(f"gradient for unknown parameter {name!r}")
        if params[name].shape != g.shape:
            raise InputError(
                f"shape mismatch for {name!r}: param {params[name].shape} vs grad {g.shape}"
            )
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        p = params[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype)
    return params
