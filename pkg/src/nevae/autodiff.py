"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` records every op whose inputs require gradients while it is
active (``with Tape() as tape: ...``).  :func:`backward` replays the tape in
reverse and accumulates ``grad`` on the leaves.  The tape is thread-local, so
concurrent training runs in different threads never share one.

Broadcasting follows the right-aligned, size-1-expansion rule; gradients of
broadcast operands are summed back to the operand shape.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are not conformable."""


class DomainError(ValueError):
    """An op was evaluated outside its mathematical domain."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Backward was requested without a usable tape."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    """A dense float64 array that may participate in the active tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.tape_id = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # arithmetic sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


ArrayLike = "Tensor | np.ndarray | float"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Records ops for one forward pass; confined to the creating thread."""

    nodes: list[_Node] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)
    _previous: "Tape | None" = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._previous = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._previous
        self._previous = None

    def watch(self, *tensors: Tensor) -> None:
        """Register leaves so that backward always assigns them a gradient."""
        for t in tensors:
            t.requires_grad = True
            self.leaves[id(t)] = t


def _needs_grad(inputs: Sequence[Tensor]) -> bool:
    return any(t.requires_grad for t in inputs)


def _emit(out_arr: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(out_arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor._wrap(out_arr)
    tape = _active_tape()
    if tape is not None and _needs_grad(inputs):
        for t in inputs:
            if t.requires_grad and t.tape_id is None and id(t) not in tape.leaves:
                tape.leaves[id(t)] = t
        out.requires_grad = True
        out.tape_id = len(tape.nodes)
        tape.nodes.append(_Node(out, inputs, backward))
    return out


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --- binary elementwise -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("div: division by zero")
    out = ad / bd
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)),
                 "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


# --- unary elementwise ------------------------------------------------------


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: argument has non-positive entries")
    ad = a.data
    return _emit(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + exp(a)) without overflow."""
    a = as_tensor(a)
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    return _emit(out, (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def clip_min(a, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    a = as_tensor(a)
    mask = a.data > lo
    return _emit(np.where(mask, a.data, lo), (a,), lambda g: (g * mask,), "clip_min")


# --- reductions and structure -----------------------------------------------


def _check_axis(a: Tensor, axis, op: str) -> None:
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {a.shape}")


def sum_(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis, "sum")
    shape = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axis)), (a,), back, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis, "mean")
    n = a.size if axis is None else a.shape[axis]
    shape = a.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit(np.asarray(a.data.mean(axis=axis)), (a,), back, "mean")


def concatenate(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concatenate: shapes {[t.shape for t in ts]} do not agree off axis {axis}"
        ) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, ts, back, "concatenate")


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing: ints and slices only."""
    a = as_tensor(a)
    items = index if isinstance(index, tuple) else (index,)
    if not all(isinstance(i, (int, slice, type(Ellipsis))) for i in items):
        raise ShapeError("slice: only integer and slice indexing is supported")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit(np.array(a.data[index]), (a,), back, "slice")


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {shape}") from None
    return _emit(out.copy(), (a,), lambda g: (g.reshape(old),), "reshape")


# --- backward ---------------------------------------------------------------


def backward(root: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every leaf of ``tape`` with d(root)/d(leaf).

    Leaves that were registered on the tape but do not reach ``root`` get a
    zero gradient.  Gradients overwrite (not accumulate into) previous values.
    """
    tape = tape if tape is not None else _active_tape()
    if tape is None:
        raise TapeError("backward needs an active tape")
    if root.data.size != 1:
        raise TapeError(f"backward root must be a scalar, got shape {root.shape}")

    grads: dict[int, np.ndarray] = {}
    if root.tape_id is not None and root.tape_id < len(tape.nodes) \
            and tape.nodes[root.tape_id].out is root:
        grads[id(root)] = np.ones_like(root.data)
        for node in reversed(tape.nodes[: root.tape_id + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    elif id(root) in tape.leaves:
        grads[id(root)] = np.ones_like(root.data)

    for key, leaf in tape.leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)


def grad(fn: Callable[..., Tensor], *args: np.ndarray) -> list[np.ndarray]:
    """Gradient of scalar ``fn(*tensors)`` with respect to each positional arg."""
    leaves = [Tensor(a) for a in args]
    with Tape() as tape:
        tape.watch(*leaves)
        out = fn(*leaves)
        backward(out, tape)
    return [leaf.grad for leaf in leaves]


# --- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def reset(self) -> None:
        self.step = 0
        self.m = []
        self.v = []


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params[i].data``.

    A ``None`` gradient freezes that parameter for this step: neither the
    parameter nor its moment buffers change.
    """
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError(f"adam_step: state holds {len(state.m)} slots, got {len(params)} params")
    for p, g, m in zip(params, grads, state.m):
        if g is not None and (g.shape != p.shape or m.shape != p.shape):
            raise ShapeError(f"adam_step: param {p.shape}, grad {g.shape}, moment {m.shape}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
