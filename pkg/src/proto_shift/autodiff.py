"""Minimal reverse-mode gradient engine.

Only the handful of ops the model needs are provided. Operations are recorded
on the tape that is active in the current context; outside a ``Tape`` block
ops run forward only, which is what evaluation uses.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape():
        loss = tensor_sum(matmul(x, w))
        backward(loss)
    w.grad  # populated
"""
from __future__ import annotations

import contextvars

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class EmptyInputError(ValueError):
    """A reduction was asked to run over zero rows."""


class BackwardError(RuntimeError):
    """Misuse of the tape: non-scalar loss, double backward, no tape."""


_active_tape: contextvars.ContextVar = contextvars.ContextVar("proto_shift_tape", default=None)


class Tensor:
    """Dense float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Op:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block are recorded in
    execution order, which is a valid topological order by construction.
    """

    def __init__(self):
        self.ops = []
        self.consumed = False
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.ops)

    def reset(self):
        self.ops = []
        self.consumed = False

    def record(self, inputs, output, backward_fn):
        output.requires_grad = True
        output._tape = self
        self.ops.append(_Op(inputs, output, backward_fn))


def _result(data, inputs, backward_fn):
    """Wrap ``data`` and record it if a tape is active and any input needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._tape = None
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, out, backward_fn)
    return out


def backward(loss):
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise BackwardError("loss was not produced on a live tape")
    if tape.consumed:
        raise BackwardError("backward already ran on this tape; call reset() first")
    tape.consumed = True

    produced = {id(op.output) for op in tape.ops}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for op in reversed(tape.ops):
        g_out = grads.pop(id(op.output), None)
        if g_out is None:
            continue
        in_grads = op.backward_fn(g_out)
        for t, g in zip(op.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if key not in produced:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------- ops


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        ga = kernels.matmul(g, B.T) if a.requires_grad else None
        gb = kernels.matmul(A.T, g) if b.requires_grad else None
        return ga, gb

    return _result(kernels.matmul(A, B), (a, b), bw)


def leaky_relu(x, slope=0.2):
    if not 0.0 <= slope <= 1.0:
        raise ValueError(f"slope must lie in [0, 1], got {slope}")
    X = x.data
    pos = X > 0
    out = np.where(pos, X, slope * X)

    def bw(g):
        return (np.where(pos, g, slope * g),)

    return _result(out, (x,), bw)


def row_mean(x):
    """Mean over the rows of an ``m x d`` tensor."""
    m = x.shape[0]
    if m == 0:
        raise EmptyInputError("row_mean over an empty set of rows")
    X = x.data
    acc = X[0].copy()
    for i in range(1, m):
        acc += X[i]
    out = acc / m

    def bw(g):
        return (np.broadcast_to(g / m, X.shape).copy(),)

    return _result(out, (x,), bw)


def pairwise_sq_dist(q, p):
    if q.data.ndim != 2 or p.data.ndim != 2 or q.shape[1] != p.shape[1]:
        raise ShapeError(f"pairwise_sq_dist: feature dims differ, {q.shape} vs {p.shape}")
    Q, P = q.data, p.data

    def bw(g):
        return kernels.pairwise_sq_dist_backward(Q, P, g)

    return _result(kernels.pairwise_sq_dist(Q, P), (q, p), bw)


def sqrt(x, eps=1e-12):
    """Elementwise sqrt(x + eps); the offset keeps the gradient finite at 0."""
    out = np.sqrt(x.data + eps)

    def bw(g):
        return (g / (2.0 * out),)

    return _result(out, (x,), bw)


def log_softmax_rows(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_rows(logits):
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-softmax of the labelled column, stabilised by max-shift."""
    L = logits.data
    if L.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects a 2-d tensor, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    nq, n = L.shape
    if labels.shape != (nq,):
        raise ShapeError(f"expected {nq} labels, got {labels.shape}")
    if nq and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax_rows(L)
    rows = np.arange(nq)
    out = np.array(-logp[rows, labels].mean())

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / nq),)

    return _result(out, (logits,), bw)


def axpby(a, x, b, y):
    if x.shape != y.shape:
        raise ShapeError(f"axpby: shapes differ, {x.shape} vs {y.shape}")
    a = float(a)
    b = float(b)

    def bw(g):
        return a * g, b * g

    return _result(a * x.data + b * y.data, (x, y), bw)


def scale(x, a):
    a = float(a)

    def bw(g):
        return (a * g,)

    return _result(a * x.data, (x,), bw)


def add_bias(x, bias):
    """Add a length-d vector to every row of an ``m x d`` tensor."""
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: cannot add {bias.shape} to rows of {x.shape}")

    def bw(g):
        return g, g.sum(axis=0)

    return _result(x.data + bias.data, (x, bias), bw)


def take_rows(x, index):
    """Gather rows ``index`` (no repeats needed, but they are allowed)."""
    index = np.asarray(index, dtype=np.int64)
    X = x.data

    def bw(g):
        out = np.zeros_like(X)
        np.add.at(out, index, g)
        return (out,)

    return _result(X[index], (x,), bw)


def stack_rows(rows):
    """Stack a list of length-d tensors into an ``n x d`` tensor."""
    if not rows:
        raise EmptyInputError("stack_rows needs at least one row")
    d = rows[0].shape
    for r in rows:
        if r.shape != d:
            raise ShapeError(f"stack_rows: row shapes differ, {d} vs {r.shape}")

    def bw(g):
        return tuple(g[i] for i in range(len(rows)))

    return _result(np.stack([r.data for r in rows]), tuple(rows), bw)


def mul(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"mul: shapes differ, {x.shape} vs {y.shape}")
    X, Y = x.data, y.data

    def bw(g):
        return g * Y, g * X

    return _result(X * Y, (x, y), bw)


def tensor_sum(x):
    X = x.data

    def bw(g):
        return (np.full(X.shape, float(g)),)

    return _result(np.array(X.sum()), (x,), bw)


# ---------------------------------------------------------------- checking


def grad_check(f, x, step=1e-4):
    """Largest per-coordinate relative error between tape and central differences.

    ``f`` maps ``x`` (a Tensor) to a scalar Tensor; it may close over other
    tensors. ``x.data`` is perturbed in place and restored afterwards.
    """
    x.requires_grad = True
    saved_grad = x.grad
    x.grad = None
    with Tape():
        out = f(x)
        if out.data.size != 1:
            raise BackwardError(f"grad_check needs a scalar function, got shape {out.shape}")
        backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved_grad

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x).item()
        flat[i] = orig - step
        fm = f(x).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * step)
    a = analytic.reshape(-1)
    denom = np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    err = np.abs(a - numeric) / denom
    return float(err.max()) if err.size else 0.0


def is_finite(t):
    return bool(np.isfinite(t.data).all())
