"""A small reverse-mode differentiation tape over dense numpy arrays.

Every differentiable operation records its parents and a vector-Jacobian
product closure. Nodes are numbered at creation, so reverse creation order
is a valid reverse topological order.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "parents", "vjp", "op", "requires_grad", "name", "_id")

    def __init__(self, data, parents=(), vjp=None, op="leaf", requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name
        self._id = next(_ids)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op!r}, shape={self.shape}{label})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return self.data.shape[0]

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: take(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def record(data, parents, vjp, op) -> Tensor:
    """Register a computed array as a node. ``vjp(g)`` returns one gradient per parent."""
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, parents, vjp, op)


def _graph(root: Tensor):
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(p for p in node.parents if p.requires_grad)
    return sorted(seen.values(), key=lambda n: n._id, reverse=True)


def backward(root: Tensor, wrt=None):
    """Propagate d(root)/d(node) through the graph.

    Gradients are accumulated into ``.grad`` of every leaf with
    ``requires_grad``. When ``wrt`` is given, returns the list of gradients of
    those tensors (zeros for tensors the root does not depend on).
    """
    if root.data.size != 1:
        raise InvalidInputError(f"backward needs a scalar root, got shape {root.shape}")
    grads = {root._id: np.ones_like(root.data)}
    for node in _graph(root):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise AssertionError(f"{node.op}: vjp shape {pg.shape} != {parent.shape}")
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg
    if wrt is None:
        return None
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


def first_nonfinite(root: Tensor):
    """The earliest-created node in the graph whose value is not finite."""
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(node.parents)
    for node in sorted(seen.values(), key=lambda n: n._id):
        if not np.all(np.isfinite(node.data)):
            return node
    return None


# ----------------------------------------------------------------------------
# elementwise and shape primitives


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = constant(a), constant(b)
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = constant(a), constant(b)
    return record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = constant(a), constant(b)
    return record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b):
    a, b = constant(a), constant(b)
    out = a.data / b.data
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a):
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b):
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a):
    return record(a.data.T, (a,), lambda g: (g.T,), "transpose")


def take(a, idx):
    """Row gather ``a[idx]`` with a scatter-add VJP (duplicate indices accumulate)."""
    idx = np.asarray(idx) if not isinstance(idx, (slice, tuple)) else idx
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return record(out, (a,), vjp, "take")


def concat(tensors, axis=-1):
    tensors = [constant(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def pad_rows(a, n):
    """Append zero rows so the result has ``n`` rows."""
    if a.shape[0] > n:
        raise InvalidInputError(f"cannot pad {a.shape[0]} rows down to {n}")
    out = np.zeros((n,) + a.shape[1:])
    out[: a.shape[0]] = a.data
    return record(out, (a,), lambda g: (g[: a.shape[0]].copy(),), "pad_rows")


def relu(a):
    mask = a.data > 0
    return record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a):
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a):
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a):
    return record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a):
    out = np.sqrt(a.data)
    return record(out, (a,), lambda g: (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),), "sqrt")


def norm(a, axis=-1):
    """Euclidean norm along ``axis``; the gradient at the origin is taken as zero."""
    out = np.sqrt((a.data * a.data).sum(axis=axis))

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (np.expand_dims(scale, axis) * a.data,)

    return record(out, (a,), vjp, "norm")


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    sm = np.exp(out)
    return record(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return record(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


# ----------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    errors: list = field(default_factory=list)
    passed: bool = True
    message: str = ""

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0


def rel_error(ad, fd):
    ad, fd = np.asarray(ad), np.asarray(fd)
    return np.abs(ad - fd) / np.maximum(1.0, np.maximum(np.abs(ad), np.abs(fd)))


def grad_check(f, inputs, step=1e-6, tol=1e-4, max_entries=None, rng=None) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    ``inputs`` are arrays or Tensors; each is perturbed in place. With
    ``max_entries`` only a random subset of each input's entries is probed.
    """
    tensors = [t if isinstance(t, Tensor) else parameter(t) for t in inputs]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    report = GradCheckReport()
    root = f(*tensors)
    bad = first_nonfinite(root)
    if bad is not None:
        report.passed = False
        report.message = f"non-finite value produced by op {bad.op!r}"
        return report
    analytic = backward(root, wrt=tensors)
    rng = rng or np.random.default_rng(0)

    def evaluate():
        return float(f(*tensors).data)

    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                report.passed = False
                report.message = f"non-finite forward value at input entry {i}"
                worst = np.inf
                break
            err = float(rel_error(g.reshape(-1)[i], (fp - fm) / (2 * h)))
            worst = max(worst, err)
        report.errors.append(worst)
        if worst > tol:
            report.passed = False
    return report
