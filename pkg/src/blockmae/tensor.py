"""Dense float tensors with a reverse-mode gradient tape.

Everything is NumPy-backed. Differentiable ops record a backward closure on
the active Graph (if one is open); ``Graph.backward`` replays the recordings
in exact reverse execution order and accumulates gradients into the tensors
that requested them. With no Graph open, ops are plain forward math.

Storage is float32 by default; wrap gradient-check code in
``with precision(np.float64):`` for the high-accuracy path.
"""

from contextlib import contextmanager

import numpy as np


class NonFiniteError(ArithmeticError):
    """An op produced (or was handed) NaN/Inf values."""


class ContractError(ValueError):
    """Shapes or arguments violate an op's contract."""


_DEFAULT_DTYPE = np.float32


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """A contiguous float array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, check=True):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        if check:
            _check_finite(self.data, "tensor construction")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match tensor shape {self.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad, check=False)


class Graph:
    """Execution tape: ops append themselves in order, backward replays reversed.

    Usage::

        with Graph() as g:
            loss = ...   # differentiable ops record here
        g.backward(loss)

    Output tensors of recorded ops get transient gradients (cleared at the
    start of every backward pass); leaf tensors created with
    ``requires_grad=True`` accumulate across passes until zeroed.
    """

    _stack = []

    def __init__(self):
        self._nodes = []  # (out_tensor, backward_fn) in execution order

    def __enter__(self):
        Graph._stack.append(self)
        return self

    def __exit__(self, *exc):
        Graph._stack.pop()
        return False

    @staticmethod
    def current():
        return Graph._stack[-1] if Graph._stack else None

    def record(self, out, backward_fn):
        out.requires_grad = True
        self._nodes.append((out, backward_fn))

    def backward(self, loss):
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        recorded = {id(out) for out, _ in self._nodes}
        if id(loss) not in recorded:
            raise ContractError("loss was not produced by ops recorded on this graph")
        for out, _ in self._nodes:
            out.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)


def _result(data, where):
    _check_finite(data, where)
    return Tensor(data, check=False)


def _reduce_to(grad, shape):
    """Sum a broadcasted gradient back down to the target shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    out = _result(a.data + b.data, "add")
    g = Graph.current()
    if g is not None and (a.requires_grad or b.requires_grad):
        def backward(grad):
            if a.requires_grad:
                a.accumulate_grad(_reduce_to(grad, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_reduce_to(grad, b.shape))
        g.record(out, backward)
    return out


def sub(a, b):
    out = _result(a.data - b.data, "sub")
    g = Graph.current()
    if g is not None and (a.requires_grad or b.requires_grad):
        def backward(grad):
            if a.requires_grad:
                a.accumulate_grad(_reduce_to(grad, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_reduce_to(-grad, b.shape))
        g.record(out, backward)
    return out


def mul(a, b):
    out = _result(a.data * b.data, "mul")
    g = Graph.current()
    if g is not None and (a.requires_grad or b.requires_grad):
        a_data, b_data = a.data, b.data
        def backward(grad):
            if a.requires_grad:
                a.accumulate_grad(_reduce_to(grad * b_data, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_reduce_to(grad * a_data, b.shape))
        g.record(out, backward)
    return out


def div(a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _result(a.data / b.data, "div")
    g = Graph.current()
    if g is not None and (a.requires_grad or b.requires_grad):
        a_data, b_data = a.data, b.data
        def backward(grad):
            if a.requires_grad:
                a.accumulate_grad(_reduce_to(grad / b_data, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_reduce_to(-grad * a_data / (b_data * b_data), b.shape))
        g.record(out, backward)
    return out


def scale(x, s):
    """Multiply by a python scalar (no tensor operand, lighter node)."""
    s = float(s)
    out = _result(x.data * s, "scale")
    g = Graph.current()
    if g is not None and x.requires_grad:
        def backward(grad):
            x.accumulate_grad(grad * s)
        g.record(out, backward)
    return out


def matmul(a, b):
    """Batched matrix product over the last two axes (NumPy semantics)."""
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    out = _result(a.data @ b.data, "matmul")
    g = Graph.current()
    if g is not None and (a.requires_grad or b.requires_grad):
        a_data, b_data = a.data, b.data
        def backward(grad):
            if a.requires_grad:
                da = grad @ np.swapaxes(b_data, -1, -2)
                a.accumulate_grad(_reduce_to(da, a.shape))
            if b.requires_grad:
                db = np.swapaxes(a_data, -1, -2) @ grad
                b.accumulate_grad(_reduce_to(db, b.shape))
        g.record(out, backward)
    return out


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape).copy(), check=False)
    g = Graph.current()
    if g is not None and x.requires_grad:
        in_shape = x.shape
        def backward(grad):
            x.accumulate_grad(grad.reshape(in_shape))
        g.record(out, backward)
    return out


def transpose(x, axes):
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)), check=False)
    g = Graph.current()
    if g is not None and x.requires_grad:
        inv = np.argsort(axes)
        def backward(grad):
            x.accumulate_grad(np.ascontiguousarray(grad.transpose(inv)))
        g.record(out, backward)
    return out


def gather_rows(x, idx):
    """Select rows along axis 1: x[B, N, D] + idx[B, M] -> [B, M, D]."""
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ContractError(f"gather_rows expects [B,N,D] and [B,M], got {x.shape}, {idx.shape}")
    out = Tensor(np.take_along_axis(x.data, idx[:, :, None], axis=1), check=False)
    g = Graph.current()
    if g is not None and x.requires_grad:
        in_shape = x.shape
        def backward(grad):
            dx = np.zeros(in_shape, dtype=grad.dtype)
            np.add.at(dx, (np.arange(in_shape[0])[:, None], idx), grad)
            x.accumulate_grad(dx)
        g.record(out, backward)
    return out


def concat_rows(parts):
    """Concatenate [B, *, D] tensors along axis 1."""
    out = Tensor(np.concatenate([p.data for p in parts], axis=1), check=False)
    g = Graph.current()
    if g is not None and any(p.requires_grad for p in parts):
        widths = [p.shape[1] for p in parts]
        def backward(grad):
            start = 0
            for p, w in zip(parts, widths):
                if p.requires_grad:
                    p.accumulate_grad(np.ascontiguousarray(grad[:, start:start + w]))
                start += w
        g.record(out, backward)
    return out


def narrow_rows(x, start, length):
    """Slice [start, start+length) along axis 1."""
    out = Tensor(np.ascontiguousarray(x.data[:, start:start + length]), check=False)
    g = Graph.current()
    if g is not None and x.requires_grad:
        in_shape = x.shape
        def backward(grad):
            dx = np.zeros(in_shape, dtype=grad.dtype)
            dx[:, start:start + length] = grad
            x.accumulate_grad(dx)
        g.record(out, backward)
    return out


def expand_batch(x, batch):
    """Tile a [C, D] tensor to [batch, C, D]."""
    out = Tensor(np.broadcast_to(x.data, (batch,) + x.shape).copy(), check=False)
    g = Graph.current()
    if g is not None and x.requires_grad:
        def backward(grad):
            x.accumulate_grad(grad.sum(axis=0))
        g.record(out, backward)
    return out


def sum_(x, axis=None, keepdims=False):
    out = _result(x.data.sum(axis=axis, keepdims=keepdims), "sum")
    g = Graph.current()
    if g is not None and x.requires_grad:
        in_shape = x.shape
        def backward(grad):
            if axis is None:
                x.accumulate_grad(np.broadcast_to(grad, in_shape).copy())
                return
            if not keepdims:
                grad = np.expand_dims(grad, axis)
            x.accumulate_grad(np.broadcast_to(grad, in_shape).copy())
        g.record(out, backward)
    return out


def mean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.size
    else:
        n = x.shape[axis]
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def sqrt(x):
    with np.errstate(invalid="ignore"):
        out = _result(np.sqrt(x.data), "sqrt")
    g = Graph.current()
    if g is not None and x.requires_grad:
        out_data = out.data
        def backward(grad):
            x.accumulate_grad(grad * 0.5 / out_data)
        g.record(out, backward)
    return out
