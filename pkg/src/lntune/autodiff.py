"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation on a :class:`Tensor` that involves a gradient-requiring input
records a node (inputs, output, local gradient rule).  :func:`backward` orders
the recorded nodes topologically into a :class:`ComputationTape` and replays
them in reverse, accumulating ``dLoss/dLeaf`` into the ``grad`` buffer of
every leaf created with ``requires_grad=True``.  Leaves that do not require
gradients never receive a buffer, and gradient rules are only evaluated for
inputs that need them, which is what makes frozen parameters cheap.

Broadcasting is deliberately narrow: two operands must have equal shapes, or
one of them must be a scalar, or the shape of one must be a trailing suffix of
the other's (a bias vector against a matrix, a mask against a batch of score
matrices).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_rule", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._rule: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._rule is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap ``out_data``; attach ``rule`` only if some parent needs a gradient.

    ``rule(g)`` receives dLoss/dOut and returns one gradient (or None) per parent.
    """
    out = Tensor(out_data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._rule = rule
    return out


# -- broadcasting ---------------------------------------------------------


def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"cannot broadcast shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def rule(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _record(a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def rule(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _record(a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def rule(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _record(a.data * b.data, (a, b), rule)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _record(a.data * s, (a,), lambda g: (g * s,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def rule(g):
        return (g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)),)

    return _record(x * cdf, (a,), rule)


def softmax(a) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(p, (a,), rule)


# -- linear algebra / shape ------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be a plain matrix applied to a batch ``a[..., m, k]``; otherwise
    both operands must carry identical leading (batch) axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch axes differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), rule)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _record(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    """Repeat ``a`` along new leading axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    _check_broadcast(a.shape, shape)
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _record(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, tensors))

    return _record(out, tensors, rule)


def getitem(a, index) -> Tensor:
    """Basic (slice / integer) indexing."""
    a = as_tensor(a)
    out = a.data[index]

    def rule(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record(np.array(out, dtype=DTYPE), (a,), rule)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record(out, (table,), rule)


# -- reductions ---------------------------------------------------------------


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, g),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.size

    def rule(g):
        return (np.full(a.shape, g / n),)

    return _record(np.asarray(a.data.mean()), (a,), rule)


# -- fused ops ---------------------------------------------------------------


def layer_norm(x, gain, bias, eps: float) -> Tensor:
    """``gain * (x - mean) / sqrt(var + eps) + bias`` over the last axis.

    ``var`` is the population variance.  Analytic backward.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise DimensionError(
            f"layer_norm width {h} does not match gain {gain.shape} / bias {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _record(out, (x, gain, bias), rule)


def cross_entropy(logits, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits[..., C]``.

    ``mask`` (same shape as ``targets``) selects the positions that count.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {targets.shape}")
    c = logits.shape[-1]
    flat = logits.data.reshape(-1, c)
    t = targets.reshape(-1)
    w = np.ones(t.shape, dtype=DTYPE) if mask is None else np.asarray(mask, DTYPE).reshape(-1)
    count = w.sum()
    if count <= 0:
        raise ContractError("cross_entropy needs at least one counted position")
    z = flat - flat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    rows = np.arange(t.size)
    safe_t = np.where(w > 0, t, 0)
    loss = -(logp[rows, safe_t] * w).sum() / count

    def rule(g):
        p = np.exp(logp)
        p[rows, safe_t] -= 1.0
        p *= (w / count)[:, None] * g
        return (p.reshape(logits.shape),)

    return _record(np.asarray(loss), (logits,), rule)


# -- tape ---------------------------------------------------------------------


class ComputationTape:
    """Recorded operations reachable from an output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def backward(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def backward(loss: Tensor) -> ComputationTape:
    """Accumulate ``dLoss/dLeaf`` into every gradient-requiring leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any gradient-requiring tensor")
    tape = ComputationTape.from_output(loss)
    tape.backward(np.ones(loss.shape, dtype=DTYPE))
    return tape


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
