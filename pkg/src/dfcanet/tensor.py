"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major numpy array (float32 or float64) and, while
grad recording is enabled, every operation appends itself to an implicit
computation graph: the output tensor keeps references to its inputs and a
closure that propagates the upstream gradient to them.  ``backward()`` on a
scalar tensor walks this graph once in reverse topological order and
accumulates ``grad`` buffers on every tensor that requires them.  The graph
is define-by-run and single-use: after a backward pass its op nodes are
spent and a fresh forward pass is needed before differentiating again.

Shape discipline is strict: binary operations demand equal shapes, with
plain Python numbers (and 0-d tensors) as the only broadcast exception.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import NumericError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf screening of every op output (off by default)."""
    global _debug_checks
    _debug_checks = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._prev = ()
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``grad`` of every graph tensor.

        ``self`` must be a scalar.  The traversal visits each recorded op
        exactly once and consumes it; a second backward through any part of
        the same graph raises.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar tensor, got shape {self.data.shape}"
            )
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
                node._backward = None
                node._spent = True
            node._prev = ()

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_coerce(other, self.dtype))

    def __rsub__(self, other):
        return add(-self, _coerce(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # method mirrors of the functional ops
    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def _toposort(root: Tensor):
    topo, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        if node._spent:
            raise RuntimeError(
                "graph already consumed by a previous backward(); rerun the forward pass"
            )
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))
    return topo


def accumulate_grad(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def make_op(data: np.ndarray, parents, backward) -> Tensor:
    """Wrap an op result, attaching the backward closure when recording."""
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by a forward operation")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(np.asarray(x, dtype=dtype))
    return Tensor(np.asarray(x, dtype=dtype))


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_binary(a: Tensor, b: Tensor, opname: str):
    if a.data.shape != b.data.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(
            f"{opname}: operand shapes {a.data.shape} and {b.data.shape} must match"
        )
    if a.data.dtype != b.data.dtype and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(
            f"{opname}: operand dtypes {a.data.dtype} and {b.data.dtype} must match"
        )


# -- elementwise ops -------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a_t = a if isinstance(a, Tensor) else _coerce(a, np.float32)
    b_t = _coerce(b, a_t.dtype)
    _check_binary(a_t, b_t, "add")
    data = a_t.data + b_t.data

    def backward():
        g = out.grad
        if a_t.requires_grad:
            accumulate_grad(a_t, g.sum() if _is_scalar(a_t) and not _is_scalar(out) else g)
        if b_t.requires_grad:
            accumulate_grad(b_t, g.sum() if _is_scalar(b_t) and not _is_scalar(out) else g)

    out = make_op(data, (a_t, b_t), backward)
    return out


def mul(a: Tensor, b) -> Tensor:
    a_t = a if isinstance(a, Tensor) else _coerce(a, np.float32)
    b_t = _coerce(b, a_t.dtype)
    _check_binary(a_t, b_t, "mul")
    data = a_t.data * b_t.data

    def backward():
        g = out.grad
        if a_t.requires_grad:
            ga = g * b_t.data
            accumulate_grad(a_t, ga.sum() if _is_scalar(a_t) and not _is_scalar(out) else ga)
        if b_t.requires_grad:
            gb = g * a_t.data
            accumulate_grad(b_t, gb.sum() if _is_scalar(b_t) and not _is_scalar(out) else gb)

    out = make_op(data, (a_t, b_t), backward)
    return out


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def backward():
        accumulate_grad(x, out.grad * (x.data > 0))

    out = make_op(data, (x,), backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    pos = d >= 0
    z = np.empty_like(d)
    z[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    z[~pos] = ez / (1.0 + ez)

    def backward():
        accumulate_grad(x, out.grad * (out.data * (1.0 - out.data)))

    out = make_op(z, (x,), backward)
    return out


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def backward():
        accumulate_grad(x, out.grad / x.data)

    out = make_op(data, (x,), backward)
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(x.data, lo, hi)

    def backward():
        inside = (x.data >= lo) & (x.data <= hi)
        accumulate_grad(x, out.grad * inside)

    out = make_op(data, (x,), backward)
    return out


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} vs {b.data.shape}"
        )
    data = a.data @ b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            accumulate_grad(a, g @ b.data.T)
        if b.requires_grad:
            accumulate_grad(b, a.data.T @ g)

    out = make_op(data, (a, b), backward)
    return out


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: (N,A,B) @ (N,B,C) -> (N,A,C)."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm expects 3-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"bmm dimensions disagree: {a.data.shape} vs {b.data.shape}")
    data = a.data @ b.data

    def backward():
        g = out.grad
        if a.requires_grad:
            accumulate_grad(a, g @ np.swapaxes(b.data, 1, 2))
        if b.requires_grad:
            accumulate_grad(b, np.swapaxes(a.data, 1, 2) @ g)

    out = make_op(data, (a, b), backward)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by per-row max subtraction."""
    if x.data.ndim < 2:
        raise ShapeError(f"softmax_rows expects >=2-d input, got shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward():
        g = out.grad
        y = out.data
        dot = (g * y).sum(axis=-1, keepdims=True)
        accumulate_grad(x, (g - dot) * y)

    out = make_op(data, (x,), backward)
    return out


# -- shape ops ---------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    data = np.reshape(x.data, shape)

    def backward():
        accumulate_grad(x, out.grad.reshape(x.data.shape))

    out = make_op(data, (x,), backward)
    return out


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward():
        accumulate_grad(x, np.transpose(out.grad, inverse))

    out = make_op(data, (x,), backward)
    return out


def channel_split(x: Tensor):
    """Split the last (channel) axis into two equal halves."""
    c = x.data.shape[-1]
    if c % 2 != 0:
        raise ShapeError(f"channel_split requires an even channel count, got {c}")
    h = c // 2

    def backward_first():
        g = np.zeros_like(x.data)
        g[..., :h] = first.grad
        accumulate_grad(x, g)

    def backward_second():
        g = np.zeros_like(x.data)
        g[..., h:] = second.grad
        accumulate_grad(x, g)

    first = make_op(np.ascontiguousarray(x.data[..., :h]), (x,), backward_first)
    second = make_op(np.ascontiguousarray(x.data[..., h:]), (x,), backward_second)
    return first, second


def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(
            f"channel_concat: leading dims differ, {a.data.shape} vs {b.data.shape}"
        )
    ca = a.data.shape[-1]
    data = np.concatenate([a.data, b.data], axis=-1)

    def backward():
        g = out.grad
        if a.requires_grad:
            accumulate_grad(a, g[..., :ca])
        if b.requires_grad:
            accumulate_grad(b, g[..., ca:])

    out = make_op(data, (a, b), backward)
    return out


# -- reductions --------------------------------------------------------------


def tsum(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward():
        accumulate_grad(x, np.broadcast_to(out.grad, x.data.shape))

    out = make_op(data, (x,), backward)
    return out


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def backward():
        accumulate_grad(x, np.broadcast_to(out.grad / n, x.data.shape))

    out = make_op(data, (x,), backward)
    return out
