"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every primitive applied to an operand
that requires a gradient records a :class:`Node` stamped with a global sequence
number, so the forward execution order is recoverable and ``backward`` can walk
the recorded graph in exact reverse order.

Only the primitives an MLP classifier and its losses need are provided:

    add, sub, mul, matmul, relu, exp, log, sum, mean, scale, add_bias,
    log_softmax

Broadcasting is limited to ``add_bias`` (row vector added to every row).
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity entered or left a primitive."""


class BackwardError(RuntimeError):
    """``backward`` was called on something it cannot differentiate."""


_seq = itertools.count()


class Node:
    __slots__ = ("op", "inputs", "backward", "seq")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.seq = next(_seq)

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """Row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, _node: Node | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node = _node

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, node: Node | None) -> "Tensor":
        # trusted path: arr is already a fresh float64 result checked by the caller
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False, None)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), like.shape))


def _check_operands(op: str, operands: Sequence[Tensor]) -> None:
    # values are not rescanned: a Tensor is finite from construction onwards
    for t in operands:
        if not isinstance(t, Tensor):
            raise TypeError(f"{op}: operands must be Tensor, got {type(t).__name__}")


def _make(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op}: non-finite result")
    if any(t.requires_grad for t in inputs):
        return Tensor._wrap(out, True, Node(op, inputs, grad_fn))
    return Tensor._wrap(out, False, None)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_operands("add", (a, b))
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_operands("sub", (a, b))
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_operands("mul", (a, b))
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_operands("matmul", (a, b))
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def relu(a: Tensor) -> Tensor:
    _check_operands("relu", (a,))
    mask = a.data > 0.0  # subgradient at 0 is 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    _check_operands("exp", (a,))
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    _check_operands("log", (a,))
    ad = a.data
    if np.any(ad <= 0.0):
        raise NonFiniteError("log: argument must be strictly positive")
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    _check_operands("sum", (a,))
    shape = a.shape
    if axis is None:
        out = np.asarray(a.data.sum())
        return _make("sum", out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.data.sum(axis=axis)
    return _make(
        "sum", out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    )


def mean(a: Tensor) -> Tensor:
    _check_operands("mean", (a,))
    n = a.data.size
    shape = a.shape
    return _make(
        "mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n),)
    )


def scale(a: Tensor, c: float) -> Tensor:
    _check_operands("scale", (a,))
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError("scale: non-finite factor")
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[i, j] + b[j]`` for a 2-D ``x`` and 1-D ``b``."""
    _check_operands("add_bias", (x, b))
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add bias {b.shape} to {x.shape}")
    return _make("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def log_softmax(z: Tensor) -> Tensor:
    """Row-wise log-softmax, stabilised by subtracting the row max."""
    _check_operands("log_softmax", (z,))
    if z.data.ndim != 2:
        raise ShapeError(f"log_softmax: expected batch x classes, got {z.shape}")
    if z.shape[1] < 2:
        raise ShapeError("log_softmax: need at least 2 classes")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def grad_fn(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _make("log_softmax", out, (z,), grad_fn)


def softmax(z: Tensor) -> Tensor:
    return exp(log_softmax(z))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sum": sum,
    "mean": mean,
    "scale": scale,
    "add_bias": add_bias,
    "log_softmax": log_softmax,
}


def apply_primitive(op_kind: str, *operands, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*operands, **kwargs)


def tape(root: Tensor) -> list[Node]:
    """Nodes reachable from ``root`` in forward execution order."""
    seen: set[int] = set()
    nodes: list[Node] = []
    stack = [root]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node.inputs)
    nodes.sort(key=lambda n: n.seq)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every leaf that requires it.

    Gradients add onto existing ``grad`` buffers; call ``zero_grad`` between
    steps when single-call semantics are wanted.
    """
    if loss.data.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardError("backward on a tensor that does not require grad")
    if loss._node is None:
        raise BackwardError("backward on a leaf: nothing was recorded")

    # interior gradients are keyed by the sequence number of the producing node
    grads: dict[int, np.ndarray] = {loss._node.seq: np.ones_like(loss.data)}
    for node in reversed(tape(loss)):
        out_grad = grads.pop(node.seq, None)
        if out_grad is None:
            continue
        in_grads = node.backward(out_grad)
        for inp, g in zip(node.inputs, in_grads):
            if not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = g.copy() if inp.grad is None else inp.grad + g
                continue
            key = inp._node.seq
            grads[key] = grads[key] + g if key in grads else g


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Largest relative disagreement between autodiff and central differences.

    The relative error of coordinate ``i`` is
    ``|a_i - n_i| / max(1, |a_i|, |n_i|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    y = f(x)
    if y.data.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {y.shape}")
    backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        plus = base.copy().reshape(-1)
        minus = base.copy().reshape(-1)
        plus[i] += h
        minus[i] -= h
        fp = f(Tensor(plus.reshape(base.shape))).item()
        fm = f(Tensor(minus.reshape(base.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("grad_check: non-finite evaluation")
        flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
