"""Minimal reverse-mode differentiation over dense NCHW arrays.

Values are float32 by default. Any floating dtype handed in explicitly is
kept, which lets gradient checks run the same graph in float64.
Reductions and convolutions accumulate in float64 regardless.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_CLAMP = 1e-12

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


Number = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, tensor has {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        backward(self)

    # -- operators ---------------------------------------------------------
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
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def apply_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
    op: str,
) -> Tensor:
    """Wrap a forward result and attach its backward rule.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    (or None) per parent, in order.
    """
    dtype = parents[0].dtype if parents else np.float32
    out = Tensor(np.asarray(data, dtype=dtype))
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def detach(a: Tensor) -> Tensor:
    out = Tensor(a.data)
    out.op = "detach"
    return out


# -- broadcasting -----------------------------------------------------------

def _broadcast_shape(sa: Tuple[int, ...], sb: Tuple[int, ...]) -> Tuple[int, ...]:
    if sa == sb:
        return sa
    if len(sa) == 0 or int(np.prod(sa)) == 1 and len(sa) <= len(sb):
        return sb
    if len(sb) == 0 or int(np.prod(sb)) == 1 and len(sb) <= len(sa):
        return sa
    if len(sa) == len(sb) == 4:
        out = []
        for axis, (da, db) in enumerate(zip(sa, sb)):
            if da == db:
                out.append(da)
            elif axis == 1 and (da == 1 or db == 1):
                out.append(max(da, db))
            else:
                raise ShapeError(
                    f"cannot broadcast {sa} with {sb}: dimension {axis} differs ({da} vs {db})"
                )
        return tuple(out)
    raise ShapeError(f"cannot broadcast {sa} with {sb}")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)), dtype=np.float64)
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------

def _binary(a, b, op: str) -> Tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    a = _wrap(a, like)
    b = _wrap(b, like)
    _broadcast_shape(a.shape, b.shape)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return apply_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return apply_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _binary(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return apply_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return apply_op(out, (a, b), bw, "div")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return apply_op(np.where(mask, a.data, 0), (a,), lambda g: (g * mask,), "relu")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return apply_op(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return apply_op(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a: Tensor) -> Tensor:
    x = a.data
    return apply_op(x * x, (a,), lambda g: (2 * g * x,), "square")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return apply_op(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    safe = np.maximum(x, LOG_CLAMP)
    live = x > LOG_CLAMP
    return apply_op(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0),), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return apply_op(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clamp")


_UNARY = {
    "relu": relu,
    "sigmoid": sigmoid,
    "abs": abs_,
    "square": square,
    "exp": exp,
    "log": log,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by operator name: relu, sigmoid, abs, square, exp, log, add, sub, mul, div."""
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} takes one operand")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} takes two operands")
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions -------------------------------------------------------------

def reduce(op: str, a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if op not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {op!r}")
    x = a.data
    if isinstance(axis, int):
        axis = (axis,)
    total = np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64)
    if axis is None:
        count = x.size
    else:
        count = int(np.prod([x.shape[i] for i in axis]))
    scale = 1.0 / count if op == "mean" and count else 1.0
    shape = x.shape

    def bw(g):
        g = np.asarray(g, dtype=np.float64) * scale
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype),)

    return apply_op(total * scale, (a,), bw, op)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("sum", a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return reduce("mean", a, axis=axis, keepdims=keepdims)


def logsumexp(values: Sequence[Tensor]) -> Tensor:
    """log(sum_i exp(v_i)), shifted by the max; elementwise across the list."""
    if len(values) == 0:
        raise ValueError("logsumexp of an empty list")
    shape = values[0].shape
    for v in values:
        if v.shape != shape:
            raise ShapeError(f"logsumexp operands differ in shape: {shape} vs {v.shape}")
    stack = np.stack([v.data.astype(np.float64) for v in values])
    m = stack.max(axis=0)
    shifted = np.exp(stack - m)
    total = shifted.sum(axis=0)
    out = m + np.log(total)
    soft = shifted / total

    def bw(g):
        g = np.asarray(g, dtype=np.float64)
        return tuple((g * soft[i]).astype(values[i].dtype) for i in range(len(values)))

    return apply_op(out, tuple(values), bw, "logsumexp")


# -- structural -------------------------------------------------------------

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects 4-D tensors")
    for axis, name in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(
                f"concat_channels: {name} extent differs ({a.shape[axis]} vs {b.shape[axis]})"
            )
    ca = a.shape[1]
    return apply_op(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :ca], g[:, ca:]),
        "concat",
    )


def channel_slice(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return apply_op(a.data[:, start:stop].copy(), (a,), bw, "slice")


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    old = a.shape
    return apply_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


# -- convolution ------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    b, c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with zero padding."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D, got shape {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D (out_ch, in_ch, kh, kw), got {kernel.shape}")
    out_ch, in_ch, kh, kw = kernel.shape
    b, c, h, w = x.shape
    if c != in_ch:
        raise ShapeError(f"conv2d in_ch mismatch: input has {c} channels, kernel expects {in_ch}")
    if bias is not None and bias.shape != (out_ch,):
        raise ShapeError(f"conv2d bias must have shape ({out_ch},), got {bias.shape}")
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{w}")

    xd = x.data.astype(np.float64)
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xd, kh, kw)
    wmat = kernel.data.reshape(out_ch, -1).astype(np.float64)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data.astype(np.float64)
    out = np.ascontiguousarray(out.reshape(b, ho, wo, out_ch).transpose(0, 3, 1, 2))

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gmat = g.astype(np.float64).transpose(0, 2, 3, 1).reshape(-1, out_ch)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (gmat.T @ cols).reshape(kernel.shape).astype(kernel.dtype)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0).astype(bias.dtype)
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(b, ho, wo, c, kh, kw)
            dxp = np.zeros((b, c, ho + kh - 1, wo + kw - 1))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + ho, j : j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            gx = dxp.astype(x.dtype)
        return (gx, gk) if bias is None else (gx, gk, gb)

    return apply_op(out, parents, bw, "conv2d")


# -- backward ---------------------------------------------------------------

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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable t with requires_grad."""
    if loss.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad")
    order = _topo_order(loss)
    pending = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
