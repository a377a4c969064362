"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A dynamic computation graph of :class:`Tensor` nodes is rebuilt on every
forward pass.  Gradients accumulate into ``Tensor.grad`` until explicitly
zeroed, so callers must reset parameter gradients between optimizer steps.
Everything runs in 64-bit; every op validates shapes on entry and finiteness
on exit.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "forward_op",
    "backward",
    "stop_gradient",
    "zero_grads",
    "finite_difference_check",
    "OPS",
]


class GraphError(ValueError):
    """Raised for shape mismatches, non-finite results, or misuse of the graph."""


def _as_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise GraphError(f"op {op!r} produced non-finite values")
    return value


class Tensor:
    """One node of the computation graph: a value, its gradient, and a backward rule."""

    __slots__ = ("value", "grad", "op", "_parents", "_backward")

    def __init__(self, value, parents: tuple = (), op: str = "leaf"):
        self.value = _as_array(value)
        _check_finite(self.value, op)
        self.grad = np.zeros_like(self.value)
        self.op = op
        self._parents = parents
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def item(self) -> float:
        return float(self.value)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.value.shape})"

    # Arithmetic sugar; everything routes through the registered ops.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(node) into every node reachable from `output`.

    `output` must hold a single element.  Repeated calls keep accumulating;
    call :func:`zero_grads` on the leaves between steps.
    """
    if output.value.size != 1:
        raise GraphError(f"backward requires a scalar output, got shape {output.value.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    output.grad = output.grad + np.ones_like(output.value)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Ops.  Each constructs the output node, checks shapes/finiteness, and wires
# a closure that adds into its parents' gradients.
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        value = a.value + b.value
    except ValueError:
        raise GraphError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    out = Tensor(_check_finite(value, "add"), (a, b), "add")

    def _bw():
        a.grad += _unbroadcast(out.grad, a.value.shape)
        b.grad += _unbroadcast(out.grad, b.value.shape)

    out._backward = _bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        value = a.value - b.value
    except ValueError:
        raise GraphError(f"sub: incompatible shapes {a.shape} and {b.shape}") from None
    out = Tensor(_check_finite(value, "sub"), (a, b), "sub")

    def _bw():
        a.grad += _unbroadcast(out.grad, a.value.shape)
        b.grad -= _unbroadcast(out.grad, b.value.shape)

    out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        value = a.value * b.value
    except ValueError:
        raise GraphError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None
    out = Tensor(_check_finite(value, "mul"), (a, b), "mul")

    def _bw():
        a.grad += _unbroadcast(out.grad * b.value, a.value.shape)
        b.grad += _unbroadcast(out.grad * a.value, b.value.shape)

    out._backward = _bw
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        value = a.value / b.value
    except ValueError:
        raise GraphError(f"div: incompatible shapes {a.shape} and {b.shape}") from None
    out = Tensor(_check_finite(value, "div"), (a, b), "div")

    def _bw():
        a.grad += _unbroadcast(out.grad / b.value, a.value.shape)
        b.grad += _unbroadcast(-out.grad * a.value / (b.value * b.value), b.value.shape)

    out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise GraphError(f"matmul: need >=2-d operands, got {a.shape} and {b.shape}")
    if a.value.shape[-1] != b.value.shape[-2]:
        raise GraphError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    value = np.matmul(a.value, b.value)
    out = Tensor(_check_finite(value, "matmul"), (a, b), "matmul")

    def _bw():
        ga = np.matmul(out.grad, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), out.grad)
        a.grad += _unbroadcast(ga, a.value.shape)
        b.grad += _unbroadcast(gb, b.value.shape)

    out._backward = _bw
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(_check_finite(value, "softmax"), (x,), "softmax")

    def _bw():
        g = out.grad
        inner = (g * out.value).sum(axis=axis, keepdims=True)
        x.grad += out.value * (g - inner)

    out._backward = _bw
    return out


def rmsnorm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2, last axis) + eps); unit gain (apply gains via mul)."""
    x = _as_tensor(x)
    ms = np.mean(x.value * x.value, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    value = x.value * inv
    out = Tensor(_check_finite(value, "rmsnorm"), (x,), "rmsnorm")
    n = x.value.shape[-1]

    def _bw():
        g = out.grad
        dot = (g * x.value).sum(axis=-1, keepdims=True)
        x.grad += inv * g - x.value * (inv ** 3) * dot / n

    out._backward = _bw
    return out


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.value))
    value = x.value * sig
    out = Tensor(_check_finite(value, "silu"), (x,), "silu")

    def _bw():
        x.grad += out.grad * sig * (1.0 + x.value * (1.0 - sig))

    out._backward = _bw
    return out


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.value <= 0):
        raise GraphError("log: non-positive input")
    out = Tensor(_check_finite(np.log(x.value), "log"), (x,), "log")

    def _bw():
        x.grad += out.grad / x.value

    out._backward = _bw
    return out


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        value = np.exp(x.value)
    out = Tensor(_check_finite(value, "exp"), (x,), "exp")

    def _bw():
        x.grad += out.grad * out.value

    out._backward = _bw
    return out


def max_with_constant(x: Tensor, c: float) -> Tensor:
    """Elementwise max(x, c); gradient flows where x > c (zero at the tie)."""
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.value, c), (x,), "max_with_constant")

    def _bw():
        x.grad += out.grad * (x.value > c)

    out._backward = _bw
    return out


def min_with_constant(x: Tensor, c: float) -> Tensor:
    """Elementwise min(x, c); gradient flows where x < c (zero at the tie)."""
    x = _as_tensor(x)
    out = Tensor(np.minimum(x.value, c), (x,), "min_with_constant")

    def _bw():
        x.grad += out.grad * (x.value < c)

    out._backward = _bw
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min of two tensors; ties route the gradient to `a`."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.shape != b.value.shape:
        raise GraphError(f"minimum: shapes differ, {a.shape} vs {b.shape}")
    take_a = a.value <= b.value
    out = Tensor(np.where(take_a, a.value, b.value), (a, b), "minimum")

    def _bw():
        a.grad += out.grad * take_a
        b.grad += out.grad * ~take_a

    out._backward = _bw
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max of two tensors; ties route the gradient to `a`."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.shape != b.value.shape:
        raise GraphError(f"maximum: shapes differ, {a.shape} vs {b.shape}")
    take_a = a.value >= b.value
    out = Tensor(np.where(take_a, a.value, b.value), (a, b), "maximum")

    def _bw():
        a.grad += out.grad * take_a
        b.grad += out.grad * ~take_a

    out._backward = _bw
    return out


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Row lookup `table[indices]`; backward scatter-adds into the table."""
    table = _as_tensor(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise GraphError("embedding_lookup: indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.value.shape[0]):
        raise GraphError(
            f"embedding_lookup: index out of range for table with {table.value.shape[0]} rows"
        )
    out = Tensor(table.value[idx], (table,), "embedding_lookup")

    def _bw():
        np.add.at(table.grad, idx, out.grad)

    out._backward = _bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise GraphError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
        ) from None
    out = Tensor(_check_finite(value, "concat"), tuple(tensors), "concat")
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bw():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            key = [slice(None)] * out.grad.ndim
            key[axis] = slice(lo, hi)
            t.grad += out.grad[tuple(key)]

    out._backward = _bw
    return out


def slice_(x: Tensor, key) -> Tensor:
    """Basic indexing `x[key]` (ints, slices, tuples thereof)."""
    x = _as_tensor(x)
    out = Tensor(x.value[key], (x,), "slice")

    def _bw():
        x.grad[key] += out.grad

    out._backward = _bw
    return out


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows along axis 0 by an integer index array."""
    x = _as_tensor(x)
    idx = np.asarray(indices)
    out = Tensor(x.value[idx], (x,), "gather_rows")

    def _bw():
        np.add.at(x.grad, idx, out.grad)

    out._backward = _bw
    return out


def scatter_rows(x: Tensor, indices, n_rows: int) -> Tensor:
    """Scatter-add rows of `x` into a zero array with `n_rows` rows."""
    x = _as_tensor(x)
    idx = np.asarray(indices)
    value = np.zeros((n_rows,) + x.value.shape[1:])
    np.add.at(value, idx, x.value)
    out = Tensor(value, (x,), "scatter_rows")

    def _bw():
        x.grad += out.grad[idx]

    out._backward = _bw
    return out


def take_along(x: Tensor, indices) -> Tensor:
    """Per-row gather on the last axis of a 2-d tensor."""
    x = _as_tensor(x)
    idx = np.asarray(indices)
    if x.value.ndim != 2 or idx.ndim != 2 or idx.shape[0] != x.value.shape[0]:
        raise GraphError(f"take_along: need matching 2-d shapes, got {x.shape} and {idx.shape}")
    out = Tensor(np.take_along_axis(x.value, idx, axis=-1), (x,), "take_along")
    rows = np.arange(x.value.shape[0])[:, None]

    def _bw():
        np.add.at(x.grad, (rows, idx), out.grad)

    out._backward = _bw
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.value.reshape(shape), (x,), "reshape")

    def _bw():
        x.grad += out.grad.reshape(x.value.shape)

    out._backward = _bw
    return out


def transpose(x: Tensor, axes: tuple) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.transpose(x.value, axes), (x,), "transpose")
    inverse = np.argsort(axes)

    def _bw():
        x.grad += np.transpose(out.grad, inverse)

    out._backward = _bw
    return out


def repeat(x: Tensor, repeats: int, axis: int) -> Tensor:
    """Repeat each slice along `axis` `repeats` times (interleaved)."""
    x = _as_tensor(x)
    out = Tensor(np.repeat(x.value, repeats, axis=axis), (x,), "repeat")
    axis = axis % x.value.ndim
    shape = x.value.shape

    def _bw():
        folded = out.grad.reshape(shape[:axis] + (shape[axis], repeats) + shape[axis + 1 :])
        x.grad += folded.sum(axis=axis + 1)

    out._backward = _bw
    return out


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.value.sum(axis=axis, keepdims=keepdims), (x,), "reduce_sum")

    def _bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.grad += np.broadcast_to(g, x.value.shape)

    out._backward = _bw
    return out


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.value.mean(axis=axis, keepdims=keepdims), (x,), "reduce_mean")
    count = x.value.size if axis is None else x.value.shape[axis]

    def _bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.grad += np.broadcast_to(g, x.value.shape) / count

    out._backward = _bw
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row negative log-likelihood of `targets` under softmax(logits).

    The class axis is the last one; the output drops it.  Gradient is
    softmax(logits) - onehot(targets), scaled by the incoming gradient.
    """
    logits = _as_tensor(logits)
    idx = np.asarray(targets)
    if idx.shape != logits.value.shape[:-1]:
        raise GraphError(
            f"cross_entropy: target shape {idx.shape} does not match logits {logits.shape}"
        )
    v = logits.value
    shifted = v - v.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    picked = np.take_along_axis(logp, idx[..., None], axis=-1)[..., 0]
    out = Tensor(_check_finite(-picked, "cross_entropy"), (logits,), "cross_entropy")
    probs = np.exp(logp)

    def _bw():
        g = probs.copy()
        np.put_along_axis(
            g, idx[..., None], np.take_along_axis(g, idx[..., None], axis=-1) - 1.0, axis=-1
        )
        logits.grad += g * out.grad[..., None]

    out._backward = _bw
    return out


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in value; propagates exactly zero gradient to its input."""
    x = _as_tensor(x)
    out = Tensor(x.value, (x,), "stop_gradient")
    out._backward = None
    return out


OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "softmax": softmax,
    "rmsnorm": rmsnorm,
    "silu": silu,
    "embedding_lookup": embedding_lookup,
    "log": log,
    "exp": exp,
    "max_with_constant": max_with_constant,
    "min_with_constant": min_with_constant,
    "minimum": minimum,
    "maximum": maximum,
    "concat": concat,
    "slice": slice_,
    "gather_rows": gather_rows,
    "scatter_rows": scatter_rows,
    "take_along": take_along,
    "reshape": reshape,
    "transpose": transpose,
    "repeat": repeat,
    "reduce_mean": reduce_mean,
    "reduce_sum": reduce_sum,
    "cross_entropy": cross_entropy,
    "stop_gradient": stop_gradient,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch by op name; see :data:`OPS` for the registry."""
    if kind not in OPS:
        raise GraphError(f"unknown op kind {kind!r}")
    return OPS[kind](*inputs, **attrs)


def finite_difference_check(
    f: Callable[[Tensor], Tensor], theta: np.ndarray, h: float = 1e-5
) -> float:
    """Max relative error between the analytic gradient of f and central differences.

    `f` builds a scalar graph from a single leaf tensor.  The graph is rebuilt
    at every perturbed point, so any stop_gradient inside `f` is re-evaluated
    there and the checker reports the total derivative.
    """
    theta = _as_array(theta)
    leaf = Tensor(theta)
    out = f(leaf)
    if out.value.size != 1:
        raise GraphError("finite_difference_check: f must return a scalar")
    backward(out)
    analytic = leaf.grad.ravel().copy()

    flat = theta.ravel().copy()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(flat.reshape(theta.shape))).value)
        flat[i] = orig - h
        fm = float(f(Tensor(flat.reshape(theta.shape))).value)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GraphError("finite_difference_check: non-finite value at perturbed point")
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - numeric) / (abs(analytic[i]) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst
