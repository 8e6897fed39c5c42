"""Dense arrays with reverse-mode differentiation.

Every differentiable quantity is a :class:`Value` wrapping a numpy array.
Operations build a graph as they execute; :func:`backward` walks the nodes
reachable from a scalar root in reverse creation order and accumulates the
total derivative into every leaf that requires a gradient.

Elementwise operations never broadcast: operands must share a shape.  The
only mixed-shape products are ``scale`` (python scalar times array) and the
explicit structural ops (``matvec``, ``add_bias``, ``pairwise_mul``).

Multiplications are tallied per op when a :func:`count_multiplications`
block is active, using the ledger

* matrix ``n x m`` times vector: ``n*m``
* elementwise product of ``n``-vectors: ``n``
* scalar times ``n``-vector: ``n``
* additions, subtractions, activations, selections: ``0``
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Value",
    "ShapeError",
    "NonFiniteError",
    "apply",
    "backward",
    "computation_record",
    "finite_difference_check",
    "GradCheckReport",
    "count_multiplications",
    "no_grad",
    "get_default_dtype",
    "set_default_dtype",
    "default_dtype",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_ids = itertools.count()
_local = threading.local()
_dtype = np.float64


def get_default_dtype():
    return _dtype


def set_default_dtype(dtype) -> None:
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording provenance (inference)."""
    previous = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


@dataclass
class MultiplicationCounter:
    total: int = 0
    by_op: dict = field(default_factory=dict)

    def add(self, op: str, count: int) -> None:
        self.total += count
        self.by_op[op] = self.by_op.get(op, 0) + count


@contextlib.contextmanager
def count_multiplications():
    """Tally scalar multiplications performed by ops inside the block."""
    previous = getattr(_local, "counter", None)
    counter = MultiplicationCounter()
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = previous


def _tally(op: str, count: int) -> None:
    counter = getattr(_local, "counter", None)
    if counter is not None:
        counter.add(op, int(count))


class Value:
    """A node in the computation graph.

    Leaves are created directly; interior nodes come out of ops and carry
    the op name, their operands and a closure mapping the output gradient
    to operand gradients.
    """

    __slots__ = ("value", "grad", "op", "parents", "_backward", "name",
                 "requires_grad", "_id")

    def __init__(self, value, name: str | None = None, requires_grad: bool = False,
                 dtype=None):
        arr = np.asarray(value, dtype=dtype or _dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite leaf value {name or ''}".strip())
        self.value = arr
        self.grad = None
        self.op = "leaf"
        self.parents: tuple = ()
        self._backward = None
        self.name = name
        self.requires_grad = requires_grad
        self._id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Value({self.op}{label}, shape={self.shape})"

    # operator sugar; semantics are those of the named ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Value):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __matmul__(self, other):
        return matvec(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _node(value: np.ndarray, op: str, parents: Sequence[Value],
          backward_fn: Callable) -> Value:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"op {op!r} produced a non-finite result")
    out = Value.__new__(Value)
    out.value = value
    out.grad = None
    out.op = op
    out.name = None
    out._id = next(_ids)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.parents = tuple(parents)
        out._backward = backward_fn
        out.requires_grad = True
    else:
        out.parents = ()
        out._backward = None
        out.requires_grad = False
    return out


def _same_shape(op: str, a: Value, b: Value) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- op set

def add(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    _same_shape("add", a, b)
    return _node(a.value + b.value, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    _same_shape("sub", a, b)
    return _node(a.value - b.value, "sub", (a, b), lambda g: (g, -g))


def one_minus(a: Value) -> Value:
    """``1 - a`` elementwise."""
    return _node(1.0 - a.value, "one_minus", (a,), lambda g: (-g,))


def mul(a, b) -> Value:
    a, b = _as_value(a), _as_value(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    _tally("mul", av.size)
    return _node(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def scale(a: Value, c: float) -> Value:
    if isinstance(c, Value):
        raise TypeError("scale takes a python scalar; use mul for two values")
    c = float(c)
    _tally("scale", a.value.size)
    return _node(a.value * c, "scale", (a,), lambda g: (g * c,))


def matvec(w: Value, x: Value) -> Value:
    """``W @ x`` for ``W`` of shape ``(n, m)`` and ``x`` of shape ``(..., m)``.

    Leading dimensions of ``x`` are rows that each get multiplied.
    """
    w, x = _as_value(w), _as_value(x)
    if w.value.ndim != 2 or x.value.ndim < 1 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"matvec: matrix {w.shape} cannot multiply {x.shape}")
    wv, xv = w.value, x.value
    _tally("matvec", wv.size * (xv.size // xv.shape[-1]))
    out = xv @ wv.T

    def backward_fn(g):
        gw = g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
        return gw, g @ wv

    return _node(out, "matvec", (w, x), backward_fn)


def add_bias(x: Value, b: Value) -> Value:
    """Add a vector ``b`` of shape ``(n,)`` to every row of ``x`` (``(..., n)``)."""
    if b.value.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    nb = b.shape[0]
    return _node(x.value + b.value, "add_bias", (x, b),
                 lambda g: (g, g.reshape(-1, nb).sum(axis=0)))


def sigmoid(a: Value) -> Value:
    s = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
    return _node(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Value) -> Value:
    t = np.tanh(a.value)
    return _node(t, "tanh", (a,), lambda g: (g * (1.0 - t * t),))


def identity(a: Value) -> Value:
    return _node(a.value, "identity", (a,), lambda g: (g,))


def log_softmax(a: Value) -> Value:
    """Normalize over the last axis in log space."""
    v = a.value
    shifted = v - v.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _node(out, "log_softmax", (a,),
                 lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def concat(parts: Sequence[Value], axis: int = -1) -> Value:
    parts = [_as_value(p) for p in parts]
    ndim = parts[0].value.ndim
    if any(p.value.ndim != ndim for p in parts):
        raise ShapeError("concat: operands differ in rank")
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _node(out, "concat", parts,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(parts: Sequence[Value]) -> Value:
    """Stack equally shaped values along a new leading axis."""
    parts = [_as_value(p) for p in parts]
    shape = parts[0].shape
    if any(p.shape != shape for p in parts):
        raise ShapeError("stack: operands differ in shape")
    out = np.stack([p.value for p in parts])
    return _node(out, "stack", parts, lambda g: tuple(g))


def row(a: Value, index: int) -> Value:
    """Select ``a[index]`` along the leading axis."""
    n = a.shape[0]
    if not -n <= index < n:
        raise IndexError(f"row {index} out of range for leading size {n}")
    shape, dtype = a.shape, a.value.dtype

    def backward_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _node(a.value[index], "row", (a,), backward_fn)


def embedding(table: Value, index: int) -> Value:
    """Row lookup in an embedding table."""
    if not 0 <= index < table.shape[0]:
        raise IndexError(f"embedding index {index} out of range [0, {table.shape[0]})")
    out = row(table, index)
    out.op = "embedding"
    return out


def flip(a: Value) -> Value:
    """Reverse the leading (time) axis."""
    return _node(a.value[::-1].copy(), "flip", (a,), lambda g: (g[::-1],))


def pairwise_mul(a: Value, b: Value) -> Value:
    """All-pairs Hadamard product: ``(T, d) x (U, d) -> (T, U, d)``."""
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_mul: shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    _tally("pairwise_mul", av.shape[0] * bv.size)
    out = av[:, None, :] * bv[None, :, :]
    return _node(out, "pairwise_mul", (a, b),
                 lambda g: ((g * bv[None]).sum(axis=1), (g * av[:, None]).sum(axis=0)))


def total(a: Value) -> Value:
    """Sum of all entries as a scalar."""
    return _node(np.asarray(a.value.sum()), "sum", (a,),
                 lambda g: (np.full(a.shape, g, dtype=a.value.dtype),))


def dot(a: Value, b: Value) -> Value:
    """Inner product of equally shaped values."""
    return total(mul(a, b))


_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "one_minus": one_minus,
    "mul": mul,
    "scale": scale,
    "matvec": matvec,
    "add_bias": add_bias,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "identity": identity,
    "log_softmax": log_softmax,
    "concat": lambda *parts, axis=-1: concat(parts, axis=axis),
    "stack": lambda *parts: stack(parts),
    "row": row,
    "embedding": embedding,
    "flip": flip,
    "pairwise_mul": pairwise_mul,
    "sum": total,
}


def register_op(name: str, fn: Callable) -> None:
    _OPS[name] = fn


def apply(op_kind: str, *operands, **kwargs) -> Value:
    """Apply the named op. ``apply("sigmoid", x)`` is ``sigmoid(x)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    return fn(*operands, **kwargs)


# ---------------------------------------------------------------- reverse pass

def computation_record(root: Value) -> list[Value]:
    """Nodes that ``root`` depends on, in creation order (operands first)."""
    seen: dict[int, Value] = {}
    pending = [root]
    while pending:
        node = pending.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        pending.extend(node.parents)
    return sorted(seen.values(), key=lambda n: n._id)


def backward(root: Value) -> dict[str, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a map from leaf name to its (accumulated) gradient.  Calling
    twice without zeroing the leaves doubles their gradients.
    """
    if root.value.size != 1 or root.value.ndim != 0:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads = {root._id: np.ones_like(root.value)}
    named: dict[str, np.ndarray] = {}
    for node in reversed(computation_record(root)):
        g = grads.pop(node._id, None)
        if g is None or not node.requires_grad:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node.name is not None:
                named[node.name] = node.grad
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg
    return named


# ---------------------------------------------------------------- verification

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    per_param: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def finite_difference_check(f: Callable[[Mapping[str, Value]], Value],
                            params: Mapping[str, np.ndarray],
                            step: float = 1e-5, tol: float = 1e-6,
                            names: Iterable[str] | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` receives a mapping of name -> leaf Value and returns a scalar Value.
    The error for a parameter array is ``|a - n|_2 / max(|a|_2, |n|_2)``
    over its entries, with ``a`` analytic and ``n`` numeric; the report
    names the array with the largest error and its worst entry.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Value(v, name=k, requires_grad=True) for k, v in base.items()}
    backward(f(leaves))
    analytic = {k: (leaves[k].grad if leaves[k].grad is not None else np.zeros_like(v))
                for k, v in base.items()}

    def evaluate(k, idx, delta):
        trial = dict(base)
        arr = base[k].copy()
        arr[idx] += delta
        trial[k] = arr
        with no_grad():
            out = float(f({n: Value(a, name=n) for n, a in trial.items()}).value)
        if not np.isfinite(out):
            raise NonFiniteError(f"f is non-finite after perturbing {k}{list(idx)}")
        return out

    per_param: dict[str, float] = {}
    worst = (0.0, None, None)
    for k in (names if names is not None else base):
        numeric = np.zeros_like(base[k])
        for idx in np.ndindex(base[k].shape):
            numeric[idx] = (evaluate(k, idx, step) - evaluate(k, idx, -step)) / (2 * step)
        diff = np.abs(analytic[k] - numeric)
        denom = max(np.linalg.norm(analytic[k]), np.linalg.norm(numeric))
        err = float(np.linalg.norm(diff) / denom) if denom > 0 else 0.0
        per_param[k] = err
        if err > worst[0] or worst[1] is None:
            idx = np.unravel_index(int(np.argmax(diff)), diff.shape) if diff.size else ()
            worst = (err, k, tuple(int(i) for i in idx))
    return GradCheckReport(worst[0], worst[1], worst[2], per_param, tol)
