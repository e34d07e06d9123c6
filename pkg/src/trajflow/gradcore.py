"""Reverse-mode automatic differentiation over float64 numpy buffers.

The engine is define-by-run: ops execute eagerly on numpy arrays and, when
a tape is active and an input is grad-tracked, append a node holding the
closure that maps the output cotangent to input cotangents. backward() then
walks the node list once in reverse, which is reverse-topological because
nodes are recorded in execution order.

Everything is float64. Broadcasting in arithmetic ops is deliberately
narrow (equal shapes, size-1 operands, or one shape a trailing suffix of
the other); shape bugs should fail loudly rather than silently broadcast.
The explicit broadcast_to op covers the remaining legitimate cases.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "Tape",
    "Tensor",
    "grad",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "bmm",
    "transpose_last2",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "gelu",
    "clamp",
    "softmax",
    "masked_softmax",
    "concat",
    "reshape",
    "flip",
    "broadcast_to",
    "tsum",
    "tmean",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised for operand shapes outside the supported broadcast patterns."""


class _TapeState(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_state = _TapeState()


def _active_tape() -> "Tape | None":
    return _state.stack[-1] if _state.stack else None


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records one forward pass; consumable by exactly one backward pass.

    Use as a context manager::

        with Tape() as tape:
            loss = f(x)
        gx, = grad(loss, [x], tape=tape)

    Tapes nest; ops record onto the innermost active tape only.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _state.stack.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited out of order")

    def _record(self, out, inputs, backward) -> None:
        self._nodes.append(_Node(out, inputs, backward))

    def backward(self, output: "Tensor") -> dict[int, np.ndarray]:
        """Accumulates cotangents from a scalar output; one shot per tape."""
        if self._consumed:
            raise RuntimeError(
                "tape already consumed by a previous backward pass; "
                "re-record the forward computation"
            )
        self._consumed = True
        if output.data.size != 1:
            raise ValueError(
                f"backward output must be scalar, got shape {output.data.shape}"
            )
        grads: dict[int, np.ndarray] = {
            id(output): np.ones_like(output.data)
        }
        for node in reversed(self._nodes):
            g_out = grads.get(id(node.out))
            if g_out is None:
                continue
            in_grads = node.backward(g_out)
            for inp, g_in in zip(node.inputs, in_grads):
                if g_in is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
        return grads


class Tensor:
    """A float64 array plus grad-tracking metadata.

    ``requires_grad`` marks leaves; it propagates to op outputs so constant
    subgraphs are never recorded. ``grad`` is populated on leaves by
    :func:`grad` for optimizer consumption.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __pow__(self, p):
        return powi(self, float(p))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _tracked(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _register(out: Tensor, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _active_tape()
    if tape is not None and _tracked(*inputs):
        out.requires_grad = True
        tape._record(out, inputs, backward)
    return out


def _broadcast_ok(sa: tuple[int, ...], sb: tuple[int, ...]) -> bool:
    if sa == sb:
        return True
    if int(np.prod(sa, dtype=np.int64)) == 1 or int(np.prod(sb, dtype=np.int64)) == 1:
        return True
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    return len(short) < len(long_) and long_[len(long_) - len(short):] == short


def _check_binary(a: Tensor, b: Tensor, opname: str) -> None:
    if not _broadcast_ok(a.data.shape, b.data.shape):
        raise ShapeError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} are outside "
            "the supported patterns (equal, size-1, or trailing suffix)"
        )


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sums a cotangent down to the shape of the operand it belongs to."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _register(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _register(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "mul")
    out = Tensor(a.data * b.data)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _register(out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_binary(a, b, "div")
    out = Tensor(a.data / b.data)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _register(out, (a, b), backward)


def powi(a: Tensor, p: float) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data ** p)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _register(out, (a,), backward)


# -- matrix products ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _register(out, (a, b), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul, (B,m,k) @ (B,k,n) -> (B,m,n)."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"bmm expects matching 3-d stacks, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"bmm inner dims disagree: {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        return (
            np.matmul(g, np.swapaxes(b.data, -1, -2)),
            np.matmul(np.swapaxes(a.data, -1, -2), g),
        )

    return _register(out, (a, b), backward)


def transpose_last2(a: Tensor) -> Tensor:
    a = _lift(a)
    out = Tensor(np.swapaxes(a.data, -1, -2))

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _register(out, (a,), backward)


# -- pointwise nonlinearities ---------------------------------------------


def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    out = Tensor(np.exp(a.data))

    def backward(g):
        return (g * out.data,)

    return _register(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    a = _lift(a)
    out = Tensor(np.log(a.data))

    def backward(g):
        return (g / a.data,)

    return _register(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    a = _lift(a)
    out = Tensor(np.sqrt(a.data))

    def backward(g):
        return (g * (0.5 / out.data),)

    return _register(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    a = _lift(a)
    out = Tensor(np.tanh(a.data))

    def backward(g):
        return (g * (1.0 - out.data * out.data),)

    return _register(out, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF."""
    a = _lift(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = Tensor(a.data * cdf)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return _register(out, (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clips to [lo, hi]; gradient is zero outside the open interval."""
    a = _lift(a)
    out = Tensor(np.clip(a.data, lo, hi))

    def backward(g):
        inside = (a.data > lo) & (a.data < hi)
        return (g * inside,)

    return _register(out, (a,), backward)


# -- softmax family --------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _register(out, (a,), backward)


def masked_softmax(a: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over entries where mask is True; fully masked rows yield zeros."""
    a = _lift(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.data.shape:
        if not _broadcast_ok(mask.shape, a.data.shape):
            raise ShapeError(
                f"masked_softmax: mask shape {mask.shape} does not align with {a.data.shape}"
            )
        mask = np.broadcast_to(mask, a.data.shape)
    neg = np.where(mask, a.data, -np.inf)
    shifted = neg - np.maximum(neg.max(axis=axis, keepdims=True), -1e30)
    e = np.where(mask, np.exp(shifted), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    y = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0.0)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _register(out, (a,), backward)


# -- structural ops ---------------------------------------------------------


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ValueError("concat of zero tensors")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _register(out, tuple(ts), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _register(out, (a,), backward)


def flip(a: Tensor, axis: int) -> Tensor:
    a = _lift(a)
    out = Tensor(np.flip(a.data, axis=axis))

    def backward(g):
        return (np.flip(g, axis=axis),)

    return _register(out, (a,), backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; the gradient sums over the expanded axes."""
    a = _lift(a)
    shape = tuple(shape)
    out = Tensor(np.broadcast_to(a.data, shape).copy())

    def backward(g):
        return (_unbroadcast(g, a.data.shape),)

    return _register(out, (a,), backward)


def take(a: Tensor, idx) -> Tensor:
    """Basic and integer-array indexing; gradient scatters with add.at."""
    a = _lift(a)
    out = Tensor(a.data[idx])

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _register(out, (a,), backward)


# -- reductions -------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _register(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


# -- driver -----------------------------------------------------------------


def grad(output: Tensor, leaves, tape: Tape | None = None) -> list[Tensor]:
    """Gradients of a scalar output with respect to each leaf.

    Consumes the tape (the innermost active one by default). Leaves that do
    not influence the output get zero gradients. Also accumulates into each
    leaf's ``.grad`` buffer for optimizer use.
    """
    if tape is None:
        tape = _active_tape()
    if tape is None:
        raise RuntimeError("grad() called with no active tape")
    grads = tape.backward(output)
    results = []
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        else:
            g = np.asarray(g, dtype=np.float64).reshape(leaf.data.shape)
        if leaf.grad is None:
            leaf.grad = g.copy()
        else:
            leaf.grad = leaf.grad + g
        results.append(Tensor(g))
    return results
