import numpy as np

_TINY = np.finfo(np.float64).eps


def gumbel_from_uniform(u):
    return -np.log(-np.log(u))


def gumbel_sample(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Standard Gumbel noise ``-log(-log(u))`` with ``u`` kept strictly inside (0, 1)."""
    u = np.clip(rng.random(shape), _TINY, 1.0 - _TINY)
    return gumbel_from_uniform(u).astype(dtype, copy=False)
