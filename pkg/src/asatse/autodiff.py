"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Only the operations the extraction network needs are provided. Every op is a
plain function that takes :class:`Tensor` operands and returns a new
:class:`Tensor` carrying a closure that maps the output gradient back to the
operand gradients. :func:`backward` walks the graph in reverse topological
order and accumulates into the ``grad`` of leaf tensors that require it.

Layout convention: feature maps are ``[channels x frames]`` matrices.
"""

from __future__ import annotations

import math
from collections import Counter
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError, InvalidShapeError, InvalidStateError, NumericError

DTYPE = np.float64
NORM_EPS = 1e-8

# Multiply-add counters, keyed by op name. Only active inside count_ops().
_op_counter: Optional[Counter] = None


@contextmanager
def count_ops() -> Iterator[Counter]:
    """Count multiply-adds performed by matmul-type ops inside the block."""
    global _op_counter
    previous = _op_counter
    _op_counter = Counter()
    try:
        yield _op_counter
    finally:
        _op_counter = previous


def _count(name: str, macs: int) -> None:
    if _op_counter is not None:
        _op_counter[name] += int(macs)


class Tensor:
    """A dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._freed = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward_fn: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._freed = False
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_2d(x: Tensor, what: str) -> None:
    if x.data.ndim != 2:
        raise InvalidShapeError(f"{what} must be 2-D, got shape {x.shape}")


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``grad`` of every gradient-requiring leaf reachable from ``loss``.

    Gradients accumulate across calls until :meth:`Tensor.zero_grad`. Unless
    ``retain_graph`` is set, the graph's closures are released afterwards.
    """
    if loss.data.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise InvalidStateError("graph already released; recompute the forward pass")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if not retain_graph:
            node._parents = ()
            node._backward = None
            node._freed = True


# ---------------------------------------------------------------------------
# pointwise


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if a.data.ndim == 2 and b.data.ndim == 2 and b.shape == (a.shape[0], 1):
        return "column"
    raise InvalidShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Pointwise ``mul`` or ``add``; ``b`` may be an ``[N x 1]`` column broadcast over ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a, b)
    if op == "mul":
        out = a.data * b.data

        def _bw(g):
            ga = g * b.data if a.requires_grad else None
            gb = None
            if b.requires_grad:
                gb = g * a.data
                if kind == "column":
                    gb = gb.sum(axis=1, keepdims=True)
            return ga, gb

    elif op == "add":
        out = a.data + b.data

        def _bw(g):
            gb = g.sum(axis=1, keepdims=True) if kind == "column" else g
            return g, gb

    else:
        raise InvalidArgumentError(f"unknown elementwise op {op!r}")
    return Tensor._result(out, (a, b), _bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant."""
    c = float(c)
    return Tensor._result(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor._result(out, (x,), lambda g: (g * out * (1.0 - out),))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with a single learnable negative slope."""
    if slope.size != 1:
        raise InvalidShapeError(f"prelu slope must hold one value, got shape {slope.shape}")
    a = slope.data.reshape(-1)[0]
    neg_part = np.minimum(x.data, 0.0)
    out = x.data + (a - 1.0) * neg_part

    def _bw(g):
        gx = None
        if x.requires_grad:
            gx = g + (a - 1.0) * (g * (neg_part < 0))
        gs = np.array(np.vdot(g, neg_part)).reshape(slope.shape)
        return gx, gs

    return Tensor._result(out, (x, slope), _bw)


def global_layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalize over all entries of ``[N x T]``, then apply per-channel gain and bias."""
    _check_2d(x, "global_layer_norm input")
    n = x.shape[0]
    if gain.shape != (n,) or bias.shape != (n,):
        raise InvalidShapeError(f"gain/bias must have shape ({n},), got {gain.shape} and {bias.shape}")
    count = x.data.size
    mu = x.data.sum() / count
    xhat = x.data - mu
    inv_std = 1.0 / math.sqrt(np.vdot(xhat, xhat) / count + eps)
    xhat *= inv_std
    out = gain.data[:, None] * xhat
    out += bias.data[:, None]

    def _bw(g):
        ggain = np.einsum("ij,ij->i", g, xhat)
        gbias = g.sum(axis=1)
        gx = None
        if x.requires_grad:
            # gxhat = g * gain; mean(gxhat * xhat) reuses the per-channel sums
            gxhat = g * gain.data[:, None]
            proj = np.dot(ggain, gain.data) / count
            gx = gxhat
            gx -= gxhat.sum() / count
            gx -= proj * xhat
            gx *= inv_std
        return gx, ggain, gbias

    return Tensor._result(out, (x, gain, bias), _bw)


def softmax(v: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by max subtraction."""
    vmax = v.data.max(axis=-1, keepdims=True)
    # one reduction catches NaN anywhere, and infinities (which would give NaN weights)
    if not math.isfinite(vmax.sum()):
        raise NumericError("softmax input contains NaN or infinity")
    out = np.subtract(v.data, vmax)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._result(out, (v,), _bw)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_2d(a, "matmul lhs")
    _check_2d(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    _count("matmul", a.shape[0] * a.shape[1] * b.shape[1])
    # np.dot skips the gufunc dispatch of @, which dominates for small and rank-one products
    out = np.dot(a.data, b.data)

    def _bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), _bw)


def vecmat(v: Tensor, m: Tensor) -> Tensor:
    """``v^T m`` for a column ``v`` ``[N x 1]`` and ``m`` ``[N x T]``, giving ``[1 x T]``."""
    _check_2d(v, "vecmat vector")
    _check_2d(m, "vecmat matrix")
    if v.shape[1] != 1 or v.shape[0] != m.shape[0]:
        raise InvalidShapeError(f"vecmat needs [N x 1] and [N x T], got {v.shape} and {m.shape}")
    _count("matmul", m.shape[0] * m.shape[1])
    out = np.dot(v.data[:, 0], m.data)

    def _bw(g):
        gv = (m.data @ g[0])[:, None] if v.requires_grad else None
        gm = np.outer(v.data, g) if m.requires_grad else None
        return gv, gm

    return Tensor._result(out[None, :], (v, m), _bw)


def transpose(x: Tensor) -> Tensor:
    _check_2d(x, "transpose input")
    return Tensor._result(x.data.T, (x,), lambda g: (g.T,))


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    shape = x.shape
    return Tensor._result(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_time(x: Tensor) -> Tensor:
    """Average the columns of ``[N x T]`` into an ``[N x 1]`` column."""
    _check_2d(x, "mean_time input")
    t = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)
    return Tensor._result(out, (x,), lambda g: (np.repeat(g / t, t, axis=1),))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors with equal column counts along the channel axis."""
    for p in parts:
        _check_2d(p, "concat_rows operand")
    if len({p.shape[1] for p in parts}) != 1:
        raise InvalidShapeError("concat_rows operands differ in column count")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=0)

    def _bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Tensor._result(out, tuple(parts), _bw)


def fit_length(x: Tensor, length: int) -> Tensor:
    """Trim or zero-pad the columns of ``[C x L]`` to ``length``."""
    _check_2d(x, "fit_length input")
    cur = x.shape[1]
    if length <= cur:
        out = x.data[:, :length].copy()

        def _bw(g):
            full = np.zeros_like(x.data)
            full[:, :length] = g
            return (full,)

    else:
        out = np.zeros((x.shape[0], length))
        out[:, :cur] = x.data

        def _bw(g):
            return (g[:, :cur],)

    return Tensor._result(out, (x,), _bw)


# ---------------------------------------------------------------------------
# convolutions


def _conv_out_len(length: int, k: int, stride: int) -> int:
    return (length - k) // stride + 1


def conv1d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Unpadded strided cross-correlation of ``[C_in x L]`` with ``[C_out x C_in x K]``."""
    _check_2d(x, "conv1d input")
    if kernel.data.ndim != 3:
        raise InvalidShapeError(f"conv1d kernel must be 3-D, got shape {kernel.shape}")
    if stride < 1:
        raise InvalidArgumentError(f"stride must be positive, got {stride}")
    c_out, c_in, k = kernel.shape
    if x.shape[0] != c_in:
        raise InvalidShapeError(f"input has {x.shape[0]} channels, kernel expects {c_in}")
    length = x.shape[1]
    if length < k:
        raise InvalidArgumentError(f"input length {length} shorter than kernel {k}")
    t = _conv_out_len(length, k, stride)
    # cols[(c, j), t] = x[c, t*stride + j]
    cols = sliding_window_view(x.data, k, axis=1)[:, ::stride, :][:, :t, :]
    cols = cols.transpose(0, 2, 1).reshape(c_in * k, t)
    w2 = kernel.data.reshape(c_out, c_in * k)
    _count("conv1d", c_out * c_in * k * t)
    out = w2 @ cols

    def _bw(g):
        gk = (g @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g).reshape(c_in, k, t)
            gx = np.zeros_like(x.data)
            span = stride * (t - 1) + 1
            for j in range(k):
                gx[:, j:j + span:stride] += gcols[:, j, :]
        return gx, gk

    return Tensor._result(out, (x, kernel), _bw)


def conv_transpose1d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv1d`: ``[C_in x T]`` with ``[C_in x C_out x K]`` -> ``[C_out x (T-1)*stride+K]``."""
    _check_2d(x, "conv_transpose1d input")
    if kernel.data.ndim != 3:
        raise InvalidShapeError(f"conv_transpose1d kernel must be 3-D, got shape {kernel.shape}")
    if stride < 1:
        raise InvalidArgumentError(f"stride must be positive, got {stride}")
    c_in, c_out, k = kernel.shape
    if x.shape[0] != c_in:
        raise InvalidShapeError(f"input has {x.shape[0]} channels, kernel expects {c_in}")
    t = x.shape[1]
    length = (t - 1) * stride + k
    k2 = kernel.data.reshape(c_in, c_out * k)
    _count("conv_transpose1d", c_out * c_in * k * t)
    frames = (k2.T @ x.data).reshape(c_out, k, t)
    out = np.zeros((c_out, length))
    span = stride * (t - 1) + 1
    for j in range(k):
        out[:, j:j + span:stride] += frames[:, j, :]

    def _bw(g):
        gcols = sliding_window_view(g, k, axis=1)[:, ::stride, :][:, :t, :]
        gcols = gcols.transpose(0, 2, 1).reshape(c_out * k, t)
        gx = k2 @ gcols if x.requires_grad else None
        gk = (x.data @ gcols.T).reshape(kernel.shape) if kernel.requires_grad else None
        return gx, gk

    return Tensor._result(out, (x, kernel), _bw)


def depthwise_conv1d(x: Tensor, kernel: Tensor, dilation: int = 1) -> Tensor:
    """Per-channel dilated convolution with symmetric 'same' zero padding.

    ``kernel`` is ``[C x P]`` with odd ``P``; output keeps the ``[C x T]`` shape.
    """
    _check_2d(x, "depthwise_conv1d input")
    c, t = x.shape
    if kernel.data.ndim != 2 or kernel.shape[0] != c:
        raise InvalidShapeError(f"depthwise kernel must be [{c} x P], got {kernel.shape}")
    p = kernel.shape[1]
    if p % 2 == 0:
        raise InvalidArgumentError("depthwise kernel size must be odd")
    pad = dilation * (p - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad)))
    out = np.zeros_like(x.data)
    for j in range(p):
        out += kernel.data[:, j:j + 1] * xp[:, j * dilation:j * dilation + t]
    _count("depthwise_conv1d", c * p * t)

    def _bw(g):
        gk = None
        if kernel.requires_grad:
            gk = np.stack([(g * xp[:, j * dilation:j * dilation + t]).sum(axis=1) for j in range(p)], axis=1)
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(p):
                gxp[:, j * dilation:j * dilation + t] += kernel.data[:, j:j + 1] * g
            gx = gxp[:, pad:pad + t]
        return gx, gk

    return Tensor._result(out, (x, kernel), _bw)


# ---------------------------------------------------------------------------
# frame pooling


def pool_groups(t: int, m: int) -> np.ndarray:
    """Sizes of the consecutive column groups of width ``m`` covering ``t`` columns.

    The last group holds the ``t mod m`` leftovers when ``m`` does not divide ``t``.
    """
    if m < 1:
        raise InvalidArgumentError(f"pool size must be positive, got {m}")
    if t < 1:
        raise InvalidArgumentError(f"frame count must be positive, got {t}")
    tm = -(-t // m)
    sizes = np.full(tm, m, dtype=np.int64)
    sizes[-1] = t - (tm - 1) * m
    return sizes


def mean_pool1d(x: Tensor, m: int) -> Tensor:
    """Average each run of ``m`` consecutive columns: ``[N x T]`` -> ``[N x ceil(T/m)]``."""
    _check_2d(x, "mean_pool1d input")
    sizes = pool_groups(x.shape[1], m)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    out = np.add.reduceat(x.data, starts, axis=1) / sizes

    def _bw(g):
        return (np.repeat(g / sizes, sizes, axis=1),)

    return Tensor._result(out, (x,), _bw)


def nearest_upsample1d(x: Tensor, m: int, t: int) -> Tensor:
    """Repeat each column ``m`` times (the last one into the leftover slots) to reach ``t`` columns."""
    _check_2d(x, "nearest_upsample1d input")
    sizes = pool_groups(t, m)
    if len(sizes) != x.shape[1]:
        raise InvalidArgumentError(
            f"{x.shape[1]} pooled columns inconsistent with T={t}, M={m} (expected {len(sizes)})"
        )
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    out = np.repeat(x.data, sizes, axis=1)

    def _bw(g):
        return (np.add.reduceat(g, starts, axis=1),)

    return Tensor._result(out, (x,), _bw)


# ---------------------------------------------------------------------------
# parameters


class ParamRegistry:
    """Ordered, uniquely named collection of trainable tensors."""

    def __init__(self):
        self._entries: dict = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._entries:
            raise InvalidArgumentError(f"duplicate parameter name {name!r}")
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = True
        t.name = name
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.items())

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list:
        return list(self._entries)

    def tensors(self) -> list:
        return list(self._entries.values())

    def parameter_count(self) -> int:
        return sum(t.size for t in self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def state(self) -> dict:
        """Copies of all parameter arrays, keyed by name."""
        return {name: t.data.copy() for name, t in self._entries.items()}

    def load_state(self, state: dict) -> None:
        if set(state) != set(self._entries):
            missing = set(self._entries) - set(state)
            extra = set(state) - set(self._entries)
            raise InvalidShapeError(f"parameter sets differ (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, t in self._entries.items():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != t.shape:
                raise InvalidShapeError(f"parameter {name!r}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.copy()
