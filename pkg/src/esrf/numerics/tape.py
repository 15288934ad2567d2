"""A small reverse-mode differentiation tape over numpy arrays.

Every operation is recorded in insertion order together with its forward
function and its vector-Jacobian product, so the graph can be replayed with
perturbed leaves (used by :func:`grad_check`) and differentiated without
touching the recorded forward values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, log_expit

from ..errors import InputError


@dataclass(frozen=True)
class _Op:
    name: str
    parents: tuple
    forward: Optional[Callable]
    vjp: Optional[Callable]
    needs_grad: bool


class Var:
    """Handle to one recorded value."""

    __slots__ = ("tape", "index")
    __array_priority__ = 100

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.index]

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, {self.tape._ops[self.index].name}, shape={self.shape})"

    def __add__(self, other):
        return self.tape.add(self, other)

    def __radd__(self, other):
        return self.tape.add(other, self)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __rmul__(self, other):
        return self.tape.mul(other, self)

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __neg__(self):
        return self.tape.mul(self, -1.0)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __getitem__(self, idx):
        return self.tape.gather(self, idx)

    @property
    def T(self):
        return self.tape.transpose(self)

    def sum(self, axis=None, keepdims=False):
        return self.tape.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return self.tape.mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self.tape.reshape(self, shape)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _softmax(x, axis, mask):
    if mask is None:
        e = np.exp(x - np.max(x, axis=axis, keepdims=True))
        e /= e.sum(axis=axis, keepdims=True)
        return e
    x = np.where(mask, x, -np.inf)
    peak = np.max(x, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(x - peak)
    total = e.sum(axis=axis, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def _log_softmax(x, axis):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    shifted -= np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return shifted


class Tape:
    def __init__(self):
        self._ops: list[_Op] = []
        self._values: list[np.ndarray] = []
        self._params: dict[str, int] = {}

    def __len__(self):
        return len(self._ops)

    # -- leaves -----------------------------------------------------------
    def param(self, name: str, value) -> Var:
        if name in self._params:
            raise InputError(f"parameter {name!r} already on tape")
        var = self._leaf(name, np.asarray(value), True)
        self._params[name] = var.index
        return var

    def const(self, value, dtype=None) -> Var:
        return self._leaf("const", np.asarray(value, dtype=dtype), False)

    def _leaf(self, name, value, needs_grad) -> Var:
        self._ops.append(_Op(name, (), None, None, needs_grad))
        self._values.append(value)
        return Var(self, len(self._ops) - 1)

    @property
    def params(self) -> dict[str, Var]:
        return {name: Var(self, i) for name, i in self._params.items()}

    def lift(self, x, like: Optional[Var] = None) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise InputError("variable belongs to another tape")
            return x
        dtype = like.value.dtype if like is not None and np.isscalar(x) else None
        return self.const(x, dtype=dtype)

    def _push(self, name, parents: Sequence[Var], forward, vjp) -> Var:
        idx = tuple(p.index for p in parents)
        needs = any(self._ops[i].needs_grad for i in idx)
        value = forward(*(self._values[i] for i in idx))
        self._ops.append(_Op(name, idx, forward, vjp, needs))
        self._values.append(value)
        return Var(self, len(self._ops) - 1)

    # -- elementwise ----------------------------------------------------------
    def add(self, a, b) -> Var:
        a, b = self._pair(a, b)
        return self._push(
            "add",
            (a, b),
            np.add,
            lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        )

    def sub(self, a, b) -> Var:
        a, b = self._pair(a, b)
        return self._push(
            "sub",
            (a, b),
            np.subtract,
            lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
        )

    def mul(self, a, b) -> Var:
        a, b = self._pair(a, b)
        return self._push(
            "mul",
            (a, b),
            np.multiply,
            lambda g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        )

    def div(self, a, b) -> Var:
        a, b = self._pair(a, b)
        return self._push(
            "div",
            (a, b),
            np.divide,
            lambda g, out, x, y: (
                _unbroadcast(g / y, x.shape),
                _unbroadcast(-g * out / y, y.shape),
            ),
        )

    def _pair(self, a, b):
        like = a if isinstance(a, Var) else b
        return self.lift(a, like), self.lift(b, like)

    def sigmoid(self, a: Var) -> Var:
        return self._push("sigmoid", (a,), expit, lambda g, out, x: (g * out * (1 - out),))

    def log_sigmoid(self, a: Var) -> Var:
        """Numerically stable ``log(sigmoid(a))``."""
        return self._push(
            "log_sigmoid",
            (a,),
            log_expit,
            lambda g, out, x: (g * expit(-x),),
        )

    def exp(self, a: Var) -> Var:
        return self._push("exp", (a,), np.exp, lambda g, out, x: (g * out,))

    def log(self, a: Var, floor: Optional[float] = None) -> Var:
        """Natural log; with ``floor`` the input is clipped from below first."""
        if floor is None:
            return self._push("log", (a,), np.log, lambda g, out, x: (g / x,))
        return self._push(
            "log",
            (a,),
            lambda x: np.log(np.maximum(x, floor)),
            lambda g, out, x: (np.where(x > floor, g / np.maximum(x, floor), 0.0),),
        )

    def clip_below(self, a: Var, lo: float) -> Var:
        """``max(a, lo)``; no gradient flows where the bound is active."""
        return self._push(
            "clip_below",
            (a,),
            lambda x: np.maximum(x, np.asarray(lo, dtype=x.dtype)),
            lambda g, out, x: (np.where(x > lo, g, 0).astype(g.dtype, copy=False),),
        )

    def fill(self, a: Var, mask, value: float) -> Var:
        """Replace entries where ``mask`` (broadcastable to ``a``) holds by a constant."""
        mask = np.asarray(mask, dtype=bool)
        return self._push(
            "fill",
            (a,),
            lambda x: np.where(mask, np.asarray(value, dtype=x.dtype), x),
            lambda g, out, x: (np.where(mask, 0, g).astype(g.dtype, copy=False),),
        )

    def relu(self, a: Var) -> Var:
        return self._push(
            "relu", (a,), lambda x: np.maximum(x, 0), lambda g, out, x: (g * (x > 0),)
        )

    def square(self, a: Var) -> Var:
        return self._push("square", (a,), np.square, lambda g, out, x: (2 * g * x,))

    # -- reductions / structure -------------------------------------------------
    def sum(self, a: Var, axis=None, keepdims=False) -> Var:
        def vjp(g, out, x):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return self._push("sum", (a,), lambda x: np.sum(x, axis=axis, keepdims=keepdims), vjp)

    def mean(self, a: Var, axis=None) -> Var:
        count = a.value.size if axis is None else a.value.shape[axis]
        return self.mul(self.sum(a, axis=axis), 1.0 / count)

    def reshape(self, a: Var, shape) -> Var:
        return self._push(
            "reshape",
            (a,),
            lambda x: np.reshape(x, shape),
            lambda g, out, x: (np.reshape(g, x.shape),),
        )

    def transpose(self, a: Var) -> Var:
        return self._push("transpose", (a,), lambda x: x.T, lambda g, out, x: (g.T,))

    def concat(self, parts: Sequence[Var], axis: int = -1) -> Var:
        parts = [self.lift(p) for p in parts]

        def vjp(g, out, *xs):
            cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
            return tuple(np.split(g, cuts, axis=axis))

        return self._push("concat", parts, lambda *xs: np.concatenate(xs, axis=axis), vjp)

    def softmax(self, a: Var, axis: int = -1, mask=None) -> Var:
        """Softmax along ``axis``; masked-out entries get weight 0 (all-masked rows are 0)."""

        def vjp(g, out, x):
            inner = np.sum(g * out, axis=axis, keepdims=True)
            return (out * (g - inner),)

        return self._push("softmax", (a,), lambda x: _softmax(x, axis, mask), vjp)

    def log_softmax(self, a: Var, axis: int = -1) -> Var:
        """``log(softmax(a))`` computed without forming the softmax first."""

        def vjp(g, out, x):
            return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

        return self._push("log_softmax", (a,), lambda x: _log_softmax(x, axis), vjp)

    def gather(self, a: Var, idx) -> Var:
        """Rows of ``a`` selected along axis 0 by an integer index array of any shape."""
        idx = np.asarray(idx)

        def vjp(g, out, x):
            flat = idx.reshape(-1)
            g2 = g.reshape(flat.size, -1)
            scatter = sp.csr_matrix(
                (np.ones(flat.size, dtype=g2.dtype), (flat, np.arange(flat.size))),
                shape=(x.shape[0], flat.size),
            )
            return (np.asarray(scatter @ g2).reshape(x.shape),)

        return self._push("gather", (a,), lambda x: x[idx], vjp)

    # -- products ---------------------------------------------------------------
    def matmul(self, a, b) -> Var:
        a, b = self._pair(a, b)

        def vjp(g, out, x, y):
            if y.ndim == 1:
                gx = g[..., None] * y
                gy = x.reshape(-1, y.shape[0]).T @ g.reshape(-1)
            elif x.ndim == 1:
                gx = y @ g
                gy = np.outer(x, g)
            else:
                gx = g @ y.T
                gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return gx, gy

        return self._push("matmul", (a, b), np.matmul, vjp)

    def spmm(self, matrix, b: Var) -> Var:
        """Constant sparse matrix times dense variable."""
        matrix = sp.csr_matrix(matrix)
        matrix_t = matrix.T.tocsr()
        return self._push(
            "spmm",
            (self.lift(b),),
            lambda x: np.asarray(matrix @ x),
            lambda g, out, x: (np.asarray(matrix_t @ g),),
        )

    def dot(self, a, b, axis: int = -1) -> Var:
        """Inner product along ``axis`` (row-wise for matrices)."""
        return self.sum(self.mul(a, b), axis=axis)

    # -- evaluation ---------------------------------------------------------------
    def replay(self, overrides: dict) -> list:
        """Re-run the recorded forward pass with some leaves replaced.

        ``overrides`` maps a leaf :class:`Var` (or its index) to a new array.
        Recorded values are left untouched.
        """
        over = {(k.index if isinstance(k, Var) else k): v for k, v in overrides.items()}
        vals: list = []
        for i, op in enumerate(self._ops):
            if op.forward is None:
                vals.append(over.get(i, self._values[i]))
            else:
                vals.append(op.forward(*(vals[p] for p in op.parents)))
        return vals

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        if loss.value.size != 1:
            raise InputError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: list = [None] * (loss.index + 1)
        grads[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            op = self._ops[i]
            if g is None or op.vjp is None or not op.needs_grad:
                continue
            inputs = [self._values[p] for p in op.parents]
            for p, pg in zip(op.parents, op.vjp(g, self._values[i], *inputs)):
                if not self._ops[p].needs_grad:
                    continue
                grads[p] = pg if grads[p] is None else grads[p] + pg
        out = {}
        for name, i in self._params.items():
            g = grads[i] if i < len(grads) else None
            out[name] = np.zeros_like(self._values[i]) if g is None else g
        return out


def value_and_grad(tape: Tape, loss: Var) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and exact reverse-mode gradients for every parameter leaf."""
    grads = tape.backward(loss)
    return float(np.asarray(loss.value).reshape(())), grads


def grad_check(
    tape: Tape,
    leaf,
    loss: Optional[Var] = None,
    eps: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``leaf`` is a parameter name or :class:`Var`.  The relative error of one
    coordinate is ``|g - fd| / max(|g|, |fd|, floor * max(1, |loss|))``.
    Central differences resolve derivatives only relative to the loss value
    (rounding error about ``ulp(loss) / eps``), hence the scaled floor.
    """
    if eps <= 0:
        raise InputError("eps must be positive")
    if isinstance(leaf, str):
        leaf = tape.params[leaf]
    if loss is None:
        loss = Var(tape, len(tape) - 1)
    name = next(n for n, i in tape._params.items() if i == leaf.index)
    analytic = tape.backward(loss)[name]
    floor = floor * max(1.0, abs(float(np.asarray(loss.value).reshape(()))))
    base = np.array(leaf.value, dtype=np.float64)
    flat = base.reshape(-1)
    worst = 0.0
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + eps
        hi = float(tape.replay({leaf: base.copy()})[loss.index])
        flat[k] = old - eps
        lo = float(tape.replay({leaf: base.copy()})[loss.index])
        flat[k] = old
        fd = (hi - lo) / (2 * eps)
        g = float(analytic.reshape(-1)[k])
        worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), floor))
    return worst
