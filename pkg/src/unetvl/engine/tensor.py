"""Dense f32/f64 tensors with reverse-mode automatic differentiation.

Every operation produces a fresh, row-major contiguous array and records a
backward closure on the output node. Calling ``backward`` on a scalar walks
the recorded graph once in reverse topological order and accumulates (+=)
gradients into every ``requires_grad`` leaf. The graph is single-use: a
second backward through the same nodes raises ``GraphError``.

Determinism contract: all kernels reduce in a fixed order, so identical
inputs give bit-identical outputs in sequential mode.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np


class EngineError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(EngineError):
    """Operand shapes are incompatible for the requested operation."""


class DtypeError(EngineError):
    """Operand dtypes disagree or are unsupported."""


class GraphError(EngineError):
    """Misuse of the autodiff graph (non-scalar loss, consumed graph, ...)."""


class NonFiniteError(EngineError):
    """A NaN or Inf surfaced where the engine guarantees finite values."""


_F32 = np.dtype(np.float32)
_F64 = np.dtype(np.float64)
_DTYPE_BY_NAME = {"f32": _F32, "f64": _F64}
_NAME_BY_DTYPE = {_F32: "f32", _F64: "f64"}

# Sentinel stored in place of a backward closure once a node has been used.
_CONSUMED = object()

_tls = threading.local()

# When True, every op output is checked for finiteness (slow; debug builds).
_debug_checks = False


def set_debug_checks(flag: bool) -> None:
    """Enable per-op finiteness assertions (the debug-build NaN policy)."""
    global _debug_checks
    _debug_checks = bool(flag)


def _grad_stack() -> list:
    if not hasattr(_tls, "grad_stack"):
        _tls.grad_stack = [True]
    return _tls.grad_stack


def grad_enabled() -> bool:
    return _grad_stack()[-1]


class no_grad:
    """Context manager that disables graph recording (pure inference)."""

    def __enter__(self):
        _grad_stack().append(False)
        return self

    def __exit__(self, *exc):
        _grad_stack().pop()
        return False


@dataclass
class RunStats:
    """Analytic allocation/FLOP tracker for one measured scope.

    ``tensor_bytes`` sums the buffers of every tensor created inside the
    scope. With grad recording on, nothing is freed until backward, so for
    a forward pass this equals the peak live-activation footprint.
    """

    tensor_bytes: int = 0
    tensor_count: int = 0
    flops: int = 0


def _stats_stack() -> list[RunStats]:
    if not hasattr(_tls, "stats_stack"):
        _tls.stats_stack = []
    return _tls.stats_stack


class track_stats:
    """``with track_stats() as s:`` records allocations and FLOPs."""

    def __enter__(self) -> RunStats:
        self._stats = RunStats()
        _stats_stack().append(self._stats)
        return self._stats

    def __exit__(self, *exc):
        _stats_stack().pop()
        return False


def _count_alloc(data: np.ndarray) -> None:
    for s in _stats_stack():
        s.tensor_bytes += data.nbytes
        s.tensor_count += 1


def _count_flops(n: int) -> None:
    if n:
        for s in _stats_stack():
            s.flops += n


def _check_dtype(d: np.dtype) -> np.dtype:
    if d not in _NAME_BY_DTYPE:
        raise DtypeError(f"unsupported dtype {d}; engine supports f32 and f64")
    return d


def resolve_dtype(dtype) -> np.dtype:
    """Accept 'f32'/'f64', numpy dtypes, or None (-> f64)."""
    if dtype is None:
        return _F64
    if isinstance(dtype, str):
        try:
            return _DTYPE_BY_NAME[dtype]
        except KeyError:
            raise DtypeError(f"unknown dtype name {dtype!r}; use 'f32' or 'f64'") from None
    return _check_dtype(np.dtype(dtype))


def dtype_name(d) -> str:
    return _NAME_BY_DTYPE[np.dtype(d)]


class Tensor:
    """A dense array plus optional gradient and graph bookkeeping.

    Public construction always copies ``data`` (inputs are never aliased or
    mutated); op outputs wrap their freshly computed arrays directly.
    """

    __slots__ = ("data", "grad", "requires_grad", "_children", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrapping a Tensor in a Tensor; use .detach() or .numpy()")
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in _NAME_BY_DTYPE:
            nd = data.dtype
        else:
            nd = resolve_dtype(dtype)
        arr = np.array(data, dtype=nd, order="C", copy=True)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._children = ()
        self._backward = None
        self._op = "leaf"
        _count_alloc(arr)

    # ------------------------------------------------------------------
    # construction helpers
    # ------------------------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, children, backward, op: str, flops: int = 0):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        needs = grad_enabled() and any(c.requires_grad for c in children)
        out.requires_grad = needs
        out._children = tuple(children) if needs else ()
        out._backward = backward if needs else None
        out._op = op
        _count_alloc(data)
        _count_flops(flops)
        if _debug_checks and not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite values produced by op '{op}'")
        return out

    @classmethod
    def zeros(cls, shape, dtype=None, requires_grad: bool = False):
        t = cls.__new__(cls)
        t.data = np.zeros(shape, dtype=resolve_dtype(dtype))
        t.grad = None
        t.requires_grad = requires_grad
        t._children = ()
        t._backward = None
        t._op = "leaf"
        _count_alloc(t.data)
        return t

    @classmethod
    def ones(cls, shape, dtype=None, requires_grad: bool = False):
        t = cls.zeros(shape, dtype=dtype, requires_grad=requires_grad)
        t.data += 1
        return t

    @classmethod
    def full(cls, shape, value, dtype=None, requires_grad: bool = False):
        t = cls.zeros(shape, dtype=dtype, requires_grad=requires_grad)
        t.data += value
        return t

    # ------------------------------------------------------------------
    # basic introspection
    # ------------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> str:
        return _NAME_BY_DTYPE[self.data.dtype]

    def numpy(self) -> np.ndarray:
        """Copy of the underlying array (tensors stay immutable)."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data.copy()
        out.grad = None
        out.requires_grad = False
        out._children = ()
        out._backward = None
        out._op = "detach"
        _count_alloc(out.data)
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op!r}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------------
    # gradient plumbing
    # ------------------------------------------------------------------

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    # operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    # method-style ops ------------------------------------------------------

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def silu(self):
        return silu(self)

    def relu(self):
        return relu(self)

    def leaky_relu(self, alpha: float = 0.01):
        return leaky_relu(self, alpha)

    def abs(self):
        return abs_(self)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def flip(self, axes):
        return flip(self, axes)

    def row(self, index: int):
        return take_row(self, index)

    def narrow(self, axis: int, start: int, length: int):
        return narrow(self, axis, start, length)

    def cumsum(self, axis: int):
        return cumsum(self, axis)

    def cummax(self, axis: int):
        return cummax(self, axis)


def zero_grads(tensors) -> None:
    """Drop accumulated gradients (callers do this between optimizer steps)."""
    for t in tensors:
        t.grad = None


def _topo_order(root: Tensor) -> list[Tensor]:
    # Iterative post-order: children always appear before their consumers.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in node._children:
            if id(child) not in visited:
                stack.append((child, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; consumes the graph.

    Loss finiteness is always checked here (the release-build NaN policy).
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward is _CONSUMED:
        raise GraphError("backward called twice on a consumed graph")
    if loss._backward is None:
        raise GraphError("loss is not the output of a recorded operation")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is NaN or Inf at backward entry")

    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        fn = node._backward
        if fn is _CONSUMED:
            raise GraphError("graph shares nodes with an already-consumed graph")
        if fn is None:
            continue  # leaf
        if node.grad is not None:
            fn(node.grad)
        node._backward = _CONSUMED
        node._children = ()
        node.grad = None  # only leaves keep gradients


# ---------------------------------------------------------------------------
# shape/broadcast helpers
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _require_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise DtypeError(f"{op}: mixed dtypes {a.dtype} vs {b.dtype}")


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    if a.data.shape == b.data.shape:  # fast path: most ops are same-shape
        return a.data.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _as_scalar(x, dtype: np.dtype):
    return dtype.type(x)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b):
    if isinstance(b, Tensor):
        _require_same_dtype(a, b, "add")
        _broadcast_shape(a, b, "add")
        out_data = a.data + b.data

        def _bw(g):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(g, b.shape))

        return Tensor._from_op(out_data, (a, b), _bw, "add", out_data.size)
    s = _as_scalar(b, a.data.dtype)
    out_data = a.data + s

    def _bw_s(g):
        a._accum(g)

    return Tensor._from_op(out_data, (a,), _bw_s, "add", out_data.size)


def sub(a: Tensor, b):
    if isinstance(b, Tensor):
        _require_same_dtype(a, b, "sub")
        _broadcast_shape(a, b, "sub")
        out_data = a.data - b.data

        def _bw(g):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(-g, b.shape))

        return Tensor._from_op(out_data, (a, b), _bw, "sub", out_data.size)
    s = _as_scalar(b, a.data.dtype)
    out_data = a.data - s

    def _bw_s(g):
        a._accum(g)

    return Tensor._from_op(out_data, (a,), _bw_s, "sub", out_data.size)


def mul(a: Tensor, b):
    if isinstance(b, Tensor):
        _require_same_dtype(a, b, "mul")
        _broadcast_shape(a, b, "mul")
        out_data = a.data * b.data

        def _bw(g):
            a._accum(_unbroadcast(g * b.data, a.shape))
            b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor._from_op(out_data, (a, b), _bw, "mul", out_data.size)
    s = _as_scalar(b, a.data.dtype)
    out_data = a.data * s

    def _bw_s(g):
        a._accum(g * s)

    return Tensor._from_op(out_data, (a,), _bw_s, "mul", out_data.size)


def div(a: Tensor, b):
    if isinstance(b, Tensor):
        _require_same_dtype(a, b, "div")
        _broadcast_shape(a, b, "div")
        out_data = a.data / b.data

        def _bw(g):
            a._accum(_unbroadcast(g / b.data, a.shape))
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._from_op(out_data, (a, b), _bw, "div", out_data.size)
    s = _as_scalar(b, a.data.dtype)
    out_data = a.data / s

    def _bw_s(g):
        a._accum(g / s)

    return Tensor._from_op(out_data, (a,), _bw_s, "div", out_data.size)


def neg(a: Tensor):
    out_data = -a.data

    def _bw(g):
        a._accum(-g)

    return Tensor._from_op(out_data, (a,), _bw, "neg", out_data.size)


def maximum(a: Tensor, b):
    """Elementwise max; on ties the gradient goes to ``a``."""
    if isinstance(b, Tensor):
        _require_same_dtype(a, b, "maximum")
        _broadcast_shape(a, b, "maximum")
        out_data = np.maximum(a.data, b.data)
        mask = a.data >= b.data

        def _bw(g):
            a._accum(_unbroadcast(g * mask, a.shape))
            b._accum(_unbroadcast(g * ~mask, b.shape))

        return Tensor._from_op(out_data, (a, b), _bw, "maximum", out_data.size)
    s = _as_scalar(b, a.data.dtype)
    out_data = np.maximum(a.data, s)
    mask = a.data >= s

    def _bw_s(g):
        a._accum(g * mask)

    return Tensor._from_op(out_data, (a,), _bw_s, "maximum", out_data.size)


# ---------------------------------------------------------------------------
# unary nonlinearities
# ---------------------------------------------------------------------------


def exp(a: Tensor):
    out_data = np.exp(a.data)

    def _bw(g):
        a._accum(g * out_data)

    return Tensor._from_op(out_data, (a,), _bw, "exp", out_data.size)


def log(a: Tensor):
    out_data = np.log(a.data)

    def _bw(g):
        a._accum(g / a.data)

    return Tensor._from_op(out_data, (a,), _bw, "log", out_data.size)


def tanh(a: Tensor):
    out_data = np.tanh(a.data)

    def _bw(g):
        a._accum(g * (1.0 - out_data * out_data))

    return Tensor._from_op(out_data, (a,), _bw, "tanh", out_data.size)


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    # Branch on sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor):
    out_data = _sigmoid_data(a.data)

    def _bw(g):
        a._accum(g * out_data * (1.0 - out_data))

    return Tensor._from_op(out_data, (a,), _bw, "sigmoid", out_data.size)


def silu(a: Tensor):
    sig = _sigmoid_data(a.data)
    out_data = a.data * sig

    def _bw(g):
        a._accum(g * (sig + a.data * sig * (1.0 - sig)))

    return Tensor._from_op(out_data, (a,), _bw, "silu", out_data.size)


def relu(a: Tensor):
    out_data = np.maximum(a.data, 0)

    def _bw(g):
        a._accum(g * (a.data > 0))

    return Tensor._from_op(out_data, (a,), _bw, "relu", out_data.size)


def leaky_relu(a: Tensor, alpha: float = 0.01):
    out_data = np.where(a.data > 0, a.data, a.data * alpha)

    def _bw(g):
        a._accum(np.where(a.data > 0, g, g * alpha))

    return Tensor._from_op(out_data, (a,), _bw, "leaky_relu", out_data.size)


def abs_(a: Tensor):
    out_data = np.abs(a.data)

    def _bw(g):
        a._accum(g * np.sign(a.data))

    return Tensor._from_op(out_data, (a,), _bw, "abs", out_data.size)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False):
    ax = _norm_axis(axis, a.data.ndim)
    out_data = a.data.sum(axis=ax, keepdims=keepdims)
    out_data = np.asarray(out_data)

    def _bw(g):
        gg = np.asarray(g)
        if ax is not None and not keepdims:
            gg = np.expand_dims(gg, ax)
        a._accum(np.broadcast_to(gg, a.shape).copy() if gg.shape != a.shape else gg)

    return Tensor._from_op(out_data, (a,), _bw, "sum", a.data.size)


def mean(a: Tensor, axis=None, keepdims: bool = False):
    ax = _norm_axis(axis, a.data.ndim)
    if ax is None:
        count = a.data.size
    else:
        count = 1
        for i in ax:
            count *= a.shape[i]
    out_data = np.asarray(a.data.mean(axis=ax, keepdims=keepdims))

    def _bw(g):
        gg = np.asarray(g) / count
        if ax is not None and not keepdims:
            gg = np.expand_dims(gg, ax)
        a._accum(np.broadcast_to(gg, a.shape).copy() if gg.shape != a.shape else gg)

    return Tensor._from_op(out_data, (a,), _bw, "mean", a.data.size)


def cumsum(a: Tensor, axis: int):
    out_data = np.cumsum(a.data, axis=axis)

    def _bw(g):
        a._accum(np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))

    return Tensor._from_op(out_data, (a,), _bw, "cumsum", a.data.size)


def cummax(a: Tensor, axis: int):
    """Running maximum; gradient flows to the first element attaining it."""
    axis = axis % a.data.ndim
    out_data = np.maximum.accumulate(a.data, axis=axis)
    # First-attainment index per position: only strict improvements update,
    # matching maximum()'s tie rule (the earlier element wins).
    positions = np.arange(a.shape[axis]).reshape(
        [-1 if i == axis else 1 for i in range(a.data.ndim)]
    )
    prev = np.roll(out_data, 1, axis=axis)
    strict = a.data > np.where(positions == 0, -np.inf, prev)
    argmax = np.maximum.accumulate(np.where(strict, positions, 0), axis=axis)

    def _bw(g):
        # Scatter-add on a freshly allocated contiguous (..., L) buffer;
        # np.put_along_axis would overwrite duplicate indices.
        length = a.shape[axis]
        gm = np.ascontiguousarray(np.moveaxis(g, axis, -1)).reshape(-1, length)
        im = np.ascontiguousarray(np.moveaxis(argmax, axis, -1)).reshape(-1, length)
        buf = np.zeros_like(gm)
        rows = np.repeat(np.arange(gm.shape[0]), length)
        np.add.at(buf, (rows, im.reshape(-1)), gm.reshape(-1))
        restored = np.moveaxis(buf.reshape(np.moveaxis(a.data, axis, -1).shape), -1, axis)
        a._accum(np.ascontiguousarray(restored))

    return Tensor._from_op(out_data, (a,), _bw, "cummax", a.data.size)


# ---------------------------------------------------------------------------
# shape ops (all copy: outputs are fresh contiguous arrays)
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape):
    shape = tuple(shape)
    try:
        out_data = np.ascontiguousarray(a.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from None
    if out_data is a.data or out_data.base is a.data:
        out_data = out_data.copy()

    def _bw(g):
        a._accum(g.reshape(a.shape))

    return Tensor._from_op(out_data, (a,), _bw, "reshape")


def transpose(a: Tensor, axes):
    axes = tuple(axes)
    out_data = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def _bw(g):
        a._accum(np.ascontiguousarray(g.transpose(inv)))

    return Tensor._from_op(out_data, (a,), _bw, "transpose")


def flip(a: Tensor, axes):
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(axes)
    out_data = np.ascontiguousarray(np.flip(a.data, axes))

    def _bw(g):
        a._accum(np.ascontiguousarray(np.flip(g, axes)))

    return Tensor._from_op(out_data, (a,), _bw, "flip")


def concat(tensors, axis: int = 0):
    tensors = list(tensors)
    first = tensors[0]
    for t in tensors[1:]:
        _require_same_dtype(first, t, "concat")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]

    def _bw(g):
        start = 0
        for t, n in zip(tensors, extents):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            t._accum(np.ascontiguousarray(g[tuple(sl)]))
            start += n

    return Tensor._from_op(out_data, tuple(tensors), _bw, "concat")


def stack(tensors, axis: int = 0):
    tensors = list(tensors)
    first = tensors[0]
    for t in tensors[1:]:
        _require_same_dtype(first, t, "stack")
        if t.shape != first.shape:
            raise ShapeError(f"stack: shapes {first.shape} and {t.shape} differ")
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def _bw(g):
        slices = np.moveaxis(g, axis, 0)
        for t, gs in zip(tensors, slices):
            t._accum(np.ascontiguousarray(gs))

    return Tensor._from_op(out_data, tuple(tensors), _bw, "stack")


def take_row(a: Tensor, index: int):
    """Select a[index] along axis 0 (the selected axis is dropped)."""
    if not (0 <= index < a.shape[0]):
        raise ShapeError(f"row index {index} out of range for shape {a.shape}")
    out_data = a.data[index].copy()

    def _bw(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[index] += g

    return Tensor._from_op(out_data, (a,), _bw, "take_row")


def narrow(a: Tensor, axis: int, start: int, length: int):
    axis = axis % a.data.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of shape {a.shape}"
        )
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = np.ascontiguousarray(a.data[sl])

    def _bw(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[sl] += g

    return Tensor._from_op(out_data, (a,), _bw, "narrow")


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor):
    _require_same_dtype(a, b, "matmul")
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data
    m, k = a.shape
    n = b.shape[1]

    def _bw(g):
        a._accum(g @ b.data.T)
        b._accum(a.data.T @ g)

    return Tensor._from_op(out_data, (a, b), _bw, "matmul", 2 * m * k * n)


def einsum(subscripts: str, a: Tensor, b: Tensor):
    """Binary einsum with autodiff.

    Restriction (checked): no index may repeat within one operand, and every
    index of an operand must appear in the output or in the other operand.
    Under that restriction the gradient of each operand is itself an einsum
    of the cotangent with the other operand.
    """
    _require_same_dtype(a, b, "einsum")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sub_a, sub_b = lhs.split(",")
    for name, sub in (("first", sub_a), ("second", sub_b)):
        if len(set(sub)) != len(sub):
            raise ShapeError(f"einsum {subscripts!r}: repeated index in {name} operand")
    if not (set(sub_a) <= set(out_sub) | set(sub_b)) or not (
        set(sub_b) <= set(out_sub) | set(sub_a)
    ):
        raise ShapeError(f"einsum {subscripts!r}: operand index not recoverable in backward")
    if len(sub_a) != a.data.ndim or len(sub_b) != b.data.ndim:
        raise ShapeError(
            f"einsum {subscripts!r}: rank mismatch for shapes {a.shape}, {b.shape}"
        )
    extents: dict[str, int] = {}
    for sub, t in ((sub_a, a), (sub_b, b)):
        for ch, n in zip(sub, t.shape):
            if extents.setdefault(ch, n) != n:
                raise ShapeError(
                    f"einsum {subscripts!r}: extent clash for index {ch!r} "
                    f"({a.shape} vs {b.shape})"
                )
    out_data = np.einsum(subscripts, a.data, b.data)
    flops = 2
    for n in extents.values():
        flops *= n

    def _bw(g):
        a._accum(np.einsum(f"{out_sub},{sub_b}->{sub_a}", g, b.data))
        b._accum(np.einsum(f"{out_sub},{sub_a}->{sub_b}", g, a.data))

    return Tensor._from_op(out_data, (a, b), _bw, "einsum", flops)


# ---------------------------------------------------------------------------
# softmax family (composites; the max shift is a constant, so grads are exact)
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1):
    shift = np.max(a.data, axis=axis, keepdims=True)
    e = exp(sub(a, Tensor(shift, dtype=a.data.dtype)))
    return div(e, sum_(e, axis=axis, keepdims=True))


def log_softmax(a: Tensor, axis: int = -1):
    shift = np.max(a.data, axis=axis, keepdims=True)
    shifted = sub(a, Tensor(shift, dtype=a.data.dtype))
    return sub(shifted, log(sum_(exp(shifted), axis=axis, keepdims=True)))


def assert_finite(t: Tensor, where: str) -> None:
    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"non-finite values at {where}")
