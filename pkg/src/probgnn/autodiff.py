"""A small define-by-run reverse-mode autodiff engine on top of numpy.

Every forward op returns a :class:`Tensor` that remembers its operands and a
closure mapping the output gradient to operand gradients.  Calling
:func:`backward` on a scalar walks that graph in reverse topological order.
The graph is rebuilt on every forward pass, so there is no global state.

All data is float64.  Binary elementwise ops broadcast the way numpy does and
reduce gradients back to operand shapes; ``matmul`` broadcasts batch
dimensions.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import special

from .errors import DomainError, EmptyTape, InvalidSpec, NonFinite, NotScalar, ShapeMismatch

__all__ = [
    "Tensor",
    "tensor",
    "constant",
    "apply_primitive",
    "backward",
    "gradient_check",
    "check_parameters",
]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    if not np.isfinite(data).all():
        raise NonFinite(f"{op} produced non-finite values")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul_elementwise")


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), bw, "div")


def scalar_mul(a, k: float) -> Tensor:
    a = constant(a)
    k = float(k)
    return _result(a.data * k, (a,), lambda g: (g * k,), "scalar_mul")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# elementwise unary ops


def relu(a) -> Tensor:
    a = constant(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = constant(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(a) -> Tensor:
    a = constant(a)
    out = special.expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = constant(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a) -> Tensor:
    a = constant(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = constant(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive input")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def softplus(a) -> Tensor:
    """log(1+exp(s)), evaluated as s + log1p(exp(-s)) for s > 0."""
    a = constant(a)
    x = a.data
    out = np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))
    slope = special.expit(x)
    return _result(out, (a,), lambda g: (g * slope,), "softplus")


def absolute(a) -> Tensor:
    a = constant(a)
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a) -> Tensor:
    a = constant(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def log_ndtr(a) -> Tensor:
    """log of the standard normal CDF, stable in both tails."""
    a = constant(a)
    out = special.log_ndtr(a.data)
    # d/dx log Phi(x) = phi(x) / Phi(x), formed in log space
    ratio = np.exp(-0.5 * a.data * a.data - 0.5 * np.log(2 * np.pi) - out)
    return _result(out, (a,), lambda g: (g * ratio,), "log_ndtr")


def softmax_rows(a, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (boolean, broadcastable to ``a``) excludes entries; excluded
    entries get probability exactly zero and receive no gradient.  Every row
    must keep at least one entry.
    """
    a = constant(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=-1)):
            raise DomainError("softmax_rows: a row has no unmasked entries")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), bw, "softmax_rows")


# ---------------------------------------------------------------------------
# structural ops


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [constant(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tensors, bw, "concat")


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; gradient scatters back with accumulation."""
    a = constant(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeMismatch(f"slice: {exc}") from None

    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _result(np.array(out, dtype=np.float64), (a,), bw, "slice")


def reshape(a, shape) -> Tensor:
    a = constant(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: {exc}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    a = constant(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeMismatch("transpose needs at least 2 dims")
        out = np.swapaxes(a.data, -1, -2)
        return _result(out, (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")
    inverse = np.argsort(axes)
    out = np.transpose(a.data, axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def tsum(a, axis=None) -> Tensor:
    a = constant(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw, "sum")


def mean(a, axis=None) -> Tensor:
    a = constant(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scalar_mul(tsum(a, axis), 1.0 / count)


_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "scalar_mul": scalar_mul,
    "div": div,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "abs": absolute,
    "square": square,
    "log_ndtr": log_ndtr,
    "softmax_rows": softmax_rows,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": getitem,
    "reshape": reshape,
    "sum": tsum,
    "mean": mean,
    "transpose": transpose,
}


def apply_primitive(op_kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``apply_primitive("relu", x)``."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise InvalidSpec(f"unknown primitive {op_kind!r}") from None
    return fn(*operands, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every trainable leaf.

    Gradients add onto whatever is already stored, so two calls on two roots
    give the gradient of their sum.  Call ``zero_grad`` between steps.
    """
    if root.data.size != 1:
        raise NotScalar(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise EmptyTape("root does not depend on any tensor that requires grad")
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# finite-difference checking


def check_parameters(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``loss_fn`` takes no arguments and reads ``params`` through a closure.
    Error per coordinate is |ad - fd| / max(1, |fd|).
    """
    if h <= 0:
        raise InvalidSpec("h must be positive")
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            try:
                p.data[idx] = orig + h
                up = loss_fn().item()
                p.data[idx] = orig - h
                down = loss_fn().item()
            finally:
                p.data[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFinite("loss not finite while probing")
            fd = (up - down) / (2 * h)
            err = abs(analytic[idx] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Check ``f`` at ``x``; a convenience wrapper over :func:`check_parameters`."""
    if not x.requires_grad:
        x = Tensor(x.data.copy(), requires_grad=True)
    return check_parameters(lambda: f(x), [x], h)
