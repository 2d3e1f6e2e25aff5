"""Reverse-mode automatic differentiation over dense float64 arrays.

A dynamic tape: every primitive builds a new Tensor that remembers its
parents and a vector-Jacobian closure. ``backward`` walks the graph once in
reverse topological order. Tensors are never mutated in place after creation,
so the tape stays valid and re-runnable.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "backward",
    "zero_grads",
    "forward_op",
    "OP_IDS",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "exp",
    "log",
    "softmax",
    "layer_norm",
    "relu",
    "gelu",
    "gather_rows",
    "sum_",
    "mean_",
    "square",
    "sqrt",
    "concat",
    "slice_",
    "broadcast_to",
    "reshape",
    "softplus",
    "stop_gradient",
    "straight_through",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


class Tensor:
    """A float64 array plus gradient accumulator and tape bookkeeping."""

    __slots__ = ("values", "requires_grad", "_grad", "_parents", "_vjp", "op")

    def __init__(self, values, requires_grad=False, _parents=(), _vjp=None, op="leaf"):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents = tuple(_parents)
        self._vjp = _vjp
        self.op = op

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.values.shape}, requires_grad={self.requires_grad})"

    # operator sugar; everything routes through the module-level primitives
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    """Wrap plain arrays/scalars as constant tensors; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(values, parents, vjp, op) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        vjp = None
        parents = ()
    return Tensor(values, requires_grad=req, _parents=parents, _vjp=vjp, op=op)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.values + b.values
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.values - b.values
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.values * b.values
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def vjp(g):
        return (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape))

    return _make(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.values / b.values
    except ValueError:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from None

    def vjp(g):
        ga = _unbroadcast(g / b.values, a.shape)
        gb = _unbroadcast(-g * a.values / (b.values * b.values), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = a.values @ b.values
    except ValueError:
        raise ShapeError(f"matmul: cannot broadcast batch dims: {a.shape} @ {b.shape}") from None

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), vjp, "matmul")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.values)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x, eps: float = 0.0) -> Tensor:
    """Natural log; `eps` is an additive floor used inside losses."""
    x = as_tensor(x)
    shifted = x.values + eps
    out = np.log(shifted)
    return _make(out, (x,), lambda g: (g / shifted,), "log")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (x,), vjp, "softmax")


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = as_tensor(x)
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return _make(out, (x,), vjp, "layer_norm")


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.values, 0.0)
    return _make(out, (x,), lambda g: (g * (x.values > 0.0),), "relu")


def gelu(x) -> Tensor:
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.values * _INV_SQRT2))
    out = x.values * cdf

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.values * x.values)
        return (g * (cdf + x.values * pdf),)

    return _make(out, (x,), vjp, "gelu")


def gather_rows(table, indices) -> Tensor:
    """Row lookup table[indices]; gradients scatter-add back into the table."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"gather_rows: indices must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"gather_rows: index out of range for table with {table.shape[0]} rows"
        )
    out = table.values[idx]

    def vjp(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(out, (table,), vjp, "gather_rows")


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), vjp, "sum")


def mean_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.values.mean(axis=axis, keepdims=keepdims)
    count = x.values.size if axis is None else x.shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(out, (x,), vjp, "mean")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.values * x.values, (x,), lambda g: (2.0 * g * x.values,), "square")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.values)
    return _make(out, (x,), lambda g: (g / (2.0 * out),), "sqrt")


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: need at least one input")
    try:
        out = np.concatenate([p.values for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[p.shape for p in parts]} along axis {axis}"
        ) from None
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        g = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(g[offsets[i] : offsets[i + 1]], 0, axis) for i in range(len(parts))
        )

    return _make(out, tuple(parts), vjp, "concat")


def slice_(x, axis: int, start: int, length: int) -> Tensor:
    x = as_tensor(x)
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ShapeError(
            f"slice: [{start}:{start + length}) out of range for axis {axis} of {x.shape}"
        )
    key = [slice(None)] * x.values.ndim
    key[axis] = slice(start, start + length)
    key = tuple(key)
    out = x.values[key]

    def vjp(g):
        gx = np.zeros_like(x.values)
        gx[key] = g
        return (gx,)

    return _make(out, (x,), vjp, "slice")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.values, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.values)
    return _make(out, (x,), lambda g: (g * expit(x.values),), "softplus")


def stop_gradient(x) -> Tensor:
    """Identity forward (shares the value buffer), zero map backward."""
    x = as_tensor(x)
    return Tensor(x.values, requires_grad=False, op="stop_gradient")


def straight_through(soft: Tensor, hard_values: np.ndarray) -> Tensor:
    """hard values forward, identity gradient onto `soft` backward.

    Tape-level form of hard + soft - stop_gradient(soft): the forward buffer is
    exactly `hard_values` (no floating-point drift from the add/sub round trip).
    """
    soft = as_tensor(soft)
    hard_values = np.asarray(hard_values, dtype=np.float64)
    if hard_values.shape != soft.shape:
        raise ShapeError(
            f"straight_through: hard shape {hard_values.shape} != soft shape {soft.shape}"
        )
    return _make(hard_values, (soft,), lambda g: (g,), "straight_through")


# ---------------------------------------------------------------------------
# dispatch by operator id (used by the gradcheck command)

OP_IDS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "relu": relu,
    "gelu": gelu,
    "gather_rows": gather_rows,
    "sum": sum_,
    "mean": mean_,
    "square": square,
    "sqrt": sqrt,
    "concat": concat,
    "slice": slice_,
    "broadcast": broadcast_to,
    "reshape": reshape,
    "softplus": softplus,
    "stop_gradient": stop_gradient,
}


def forward_op(name: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by operator id."""
    try:
        fn = OP_IDS[name]
    except KeyError:
        raise ValueError(f"unknown operator id: {name!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into .grad for every requires_grad node.

    `loss` must be a scalar. Repeated calls keep accumulating; use zero_grads
    to reset between optimization steps.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.values.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # iterative postorder DFS -> topological order over requires_grad ancestors
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    # fresh per-call working grads, then fold into the persistent accumulators
    work: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(topo):
        g = work.pop(id(node), None)
        if g is None:
            continue
        if node._grad is None:
            node._grad = g.copy()
        else:
            node._grad = node._grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = work.get(id(parent))
            work[id(parent)] = pg if prev is None else prev + pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t._grad = None
