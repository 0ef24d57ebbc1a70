"""Dense float64 tensors with taped reverse-mode differentiation.

The engine is deliberately small: a fixed set of operations (matmul, 3x3
convolution, pointwise arithmetic, reductions, softmax, concat, pooling and
a pairwise-distance kernel) recorded eagerly onto a ``Tape``. Recording
order is execution order, so the tape is already topologically sorted and
the backward pass is a single reverse sweep that visits every node once.

Everything is float64: the test suite leans on central finite differences,
and the precision headroom matters far more than speed at this scale.
Tensors are treated as immutable values after creation; the only sanctioned
mutation is the optimizer writing updated parameter values in place between
tapes.
"""

from __future__ import annotations

import functools
from typing import Callable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "sigmoid",
    "log",
    "sqrt",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "stack",
    "tsum",
    "tmean",
    "tmax",
    "softmax",
    "conv2d",
    "avg_pool2d",
    "pairwise_distances",
]


class Tensor:
    """Immutable dense array of float64 values.

    ``requires_grad`` marks a leaf as trainable; tensors produced by
    operations inherit the flag from their inputs. Non-finite values are
    rejected at construction, which makes every op boundary a NaN/Inf
    checkpoint.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars are wrapped as constant 0-d tensors except
    # for plain float scaling which has its own cheaper op.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class TapeNode(NamedTuple):
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Eager record of differentiable operations.

    Use as a context manager around the forward computation; every op that
    produces a grad-requiring output inside the block appends one node.
    A tape is single-writer: share one per unit of concurrent work.
    """

    def __init__(self):
        self._nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited out of order")
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse sweep from a scalar loss.

        Returns gradients for every grad-requiring leaf reached from the
        loss and stores them on ``tensor.grad`` (overwriting, not
        accumulating, across calls). A tensor consumed several times
        receives the sum of all contributions.
        """
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        produced_at = {id(n.output): i for i, n in enumerate(self._nodes)}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for i in range(len(self._nodes) - 1, -1, -1):
            node = self._nodes[i]
            g = grads.pop(id(node.output), None)
            holders.pop(id(node.output), None)
            if g is None:
                continue
            for t in node.inputs:
                j = produced_at.get(id(t))
                if j is not None and j >= i:
                    raise RuntimeError(f"cycle in tape at op '{node.op}'")
            for t, ig in zip(node.inputs, node.backward(g)):
                if ig is None or not t.requires_grad:
                    continue
                tid = id(t)
                if tid in grads:
                    grads[tid] = grads[tid] + ig
                else:
                    grads[tid] = ig
                holders[tid] = t
        out: dict[Tensor, np.ndarray] = {}
        for tid, g in grads.items():
            t = holders[tid]
            t.grad = g
            out[t] = g
        return out

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients for an explicit parameter list; unused entries get zeros."""
        got = self.backward(loss)
        return [got.get(p, np.zeros_like(p.data)) for p in wrt]


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            backward: Callable) -> Tensor:
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    if _TAPE_STACK and out.requires_grad:
        _TAPE_STACK[-1]._nodes.append(TapeNode(op, inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape``, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# pointwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out = a.data + b.data
    return _record("add", (a, b), out, lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    out = a.data - b.data
    return _record("sub", (a, b), out, lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    return _record("mul", (a, b), out, lambda g: (
        _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _record("div", (a, b), out, lambda g: (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (x,), x.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    # Gradient at exactly zero is defined as zero.
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0),
                   lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # Two-branch form avoids exp overflow for large |x|.
    with np.errstate(over="ignore", invalid="ignore"):
        pos = 1.0 / (1.0 + np.exp(-x.data))
        e = np.exp(x.data)
        neg = e / (1.0 + e)
    y = np.where(x.data >= 0, pos, neg)
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _record("log", (x,), out, lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _record("matmul", (a, b), out, lambda g: (
        g @ b.data.T if a.requires_grad else None,
        a.data.T @ g if b.requires_grad else None))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError(f"transpose expects a 2-d tensor, got {x.shape}")
    return _record("transpose", (x,), x.data.T.copy(), lambda g: (g.T,))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    in_shape = x.shape
    return _record("reshape", (x,), x.data.reshape(shape),
                   lambda g: (g.reshape(in_shape),))


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    if a.ndim != b.ndim:
        raise ValueError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    for ax in range(a.ndim):
        if ax != axis % a.ndim and a.shape[ax] != b.shape[ax]:
            raise ValueError(f"concat: non-concat dims differ, {a.shape} vs {b.shape}")
    axis = axis % a.ndim
    out = np.concatenate([a.data, b.data], axis=axis)
    na = a.shape[axis]

    def bwd(g):
        ga, gb = np.split(g, [na], axis=axis)
        return ga, gb

    return _record("concat", (a, b), out, bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack equal-shape tensors along a new leading axis (concat plumbing)."""
    if not tensors:
        raise ValueError("stack: empty sequence")
    if axis != 0:
        raise ValueError("stack supports axis=0 only")
    rows = [reshape(t, (1,) + t.shape) for t in tensors]
    out = rows[0]
    for row in rows[1:]:
        out = concat(out, row, axis=0)
    return out


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(ax % ndim for ax in axis)
    if len(set(axes)) != len(axes):
        raise ValueError(f"duplicate axis in {axis}")
    for ax in axes:
        if not 0 <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for ndim {ndim}")
    return axes


def _expand_reduced(g: np.ndarray, in_shape: tuple[int, ...],
                    axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, x.ndim)
    for ax in axes:
        if x.shape[ax] == 0:
            raise ValueError(f"sum over empty axis {ax} of shape {x.shape}")
    out = x.data.sum(axis=axes, keepdims=keepdims)
    in_shape = x.shape
    return _record("sum", (x,), out,
                   lambda g: (_expand_reduced(g, in_shape, axes, keepdims).copy(),))


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axis_tuple(axis, x.ndim)
    count = 1
    for ax in axes:
        if x.shape[ax] == 0:
            raise ValueError(f"mean over empty axis {ax} of shape {x.shape}")
        count *= x.shape[ax]
    out = x.data.mean(axis=axes, keepdims=keepdims)
    in_shape = x.shape
    return _record("mean", (x,), out, lambda g: (
        _expand_reduced(g, in_shape, axes, keepdims) / count,))


def tmax(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction over one axis (or all); ties route to the lowest index."""
    if axis is None:
        if x.size == 0:
            raise ValueError("max of empty tensor")
        flat_idx = int(np.argmax(x.data))
        out = x.data.reshape(-1)[flat_idx]
        if keepdims:
            out = np.full((1,) * x.ndim, out)
        in_shape = x.shape

        def bwd_all(g):
            gx = np.zeros(in_shape)
            gx.reshape(-1)[flat_idx] = np.asarray(g).reshape(())
            return (gx,)

        return _record("max", (x,), out, bwd_all)

    ax = axis % x.ndim
    if x.shape[ax] == 0:
        raise ValueError(f"max over empty axis {ax} of shape {x.shape}")
    idx = np.argmax(x.data, axis=ax)
    out = np.take_along_axis(x.data, np.expand_dims(idx, ax), axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)
    in_shape = x.shape

    def bwd(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        gx = np.zeros(in_shape)
        np.put_along_axis(gx, np.expand_dims(idx, ax), gk, axis=ax)
        return (gx,)

    return _record("max", (x,), out, bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along one axis, computed with max-subtraction for stability."""
    ax = axis % x.ndim if x.ndim else 0
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax", (x,), y, bwd)


# ---------------------------------------------------------------------------
# convolution and pooling


@functools.lru_cache(maxsize=64)
def _col2im_index(c: int, hp: int, wp: int, ho: int, wo: int,
                  stride: int) -> np.ndarray:
    """Flat padded-input index for each (patch position, patch element)."""
    c_idx = np.repeat(np.arange(c), 9)
    kh_idx = np.tile(np.repeat(np.arange(3), 3), c)
    kw_idx = np.tile(np.arange(3), c * 3)
    ho_idx = np.repeat(np.arange(ho), wo)
    wo_idx = np.tile(np.arange(wo), ho)
    rows = ho_idx[:, None] * stride + kh_idx[None, :]
    cols = wo_idx[:, None] * stride + kw_idx[None, :]
    return (c_idx[None, :] * (hp * wp) + rows * wp + cols).ravel()


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None,
           stride: int = 1) -> Tensor:
    """3x3 cross-correlation with fixed padding 1.

    ``x`` is either one map ``[C, H, W]`` or a batch ``[N, C, H, W]``
    processed independently per item. Differentiable w.r.t. the input, the
    kernel ``[C_out, C, 3, 3]`` and the optional per-channel bias.
    """
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ValueError(f"conv2d expects 3-d or 4-d input, got {x.shape}")
    if k.ndim != 4 or k.shape[2:] != (3, 3):
        raise ValueError(f"conv2d kernel must be [C_out, C, 3, 3], got {k.shape}")
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    if k.shape[1] != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {k.shape[1]}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    hp, wp = h + 2, w + 2
    if hp < 3 or wp < 3:
        raise ValueError(f"conv2d: kernel larger than padded input {hp}x{wp}")
    ho = (hp - 3) // stride + 1
    wo = (wp - 3) // stride + 1
    co = k.shape[0]
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({co},)")

    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    # cols: [N, Ho*Wo, C*9]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * 9)
    kmat = k.data.reshape(co, c * 9)
    out = cols @ kmat.T
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 2, 1).reshape(n, co, ho, wo)

    inputs = (x, k) if bias is None else (x, k, bias)

    def bwd(g):
        g4 = g[None] if squeeze else g
        gmat = g4.reshape(n, co, ho * wo).transpose(0, 2, 1)
        gk = np.einsum("npo,npq->oq", gmat, cols).reshape(k.shape) \
            if k.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = gmat @ kmat
            idx = _col2im_index(c, hp, wp, ho, wo, stride)
            offs = np.arange(n) * (c * hp * wp)
            flat = (offs[:, None] + idx[None, :]).ravel()
            gxp = np.bincount(flat, weights=gcols.ravel(),
                              minlength=n * c * hp * wp)
            gxp = gxp.reshape(n, c, hp, wp)
            gx = gxp[:, :, 1:-1, 1:-1]
            if squeeze:
                gx = gx[0]
        if bias is None:
            return gx, gk
        gb = g4.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gk, gb

    return _record("conv2d", inputs, out[0] if squeeze else out, bwd)


def avg_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping mean pooling; spatial dims must divide the window."""
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ValueError(f"avg_pool2d expects 3-d or 4-d input, got {x.shape}")
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    if h % window or w % window:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by window {window}")
    ho, wo = h // window, w // window
    out = xd.reshape(n, c, ho, window, wo, window).mean(axis=(3, 5))

    def bwd(g):
        g4 = g[None] if squeeze else g
        gx = np.repeat(np.repeat(g4, window, axis=2), window, axis=3)
        gx = gx / (window * window)
        return (gx[0] if squeeze else gx,)

    return _record("avg_pool2d", (x,), out[0] if squeeze else out, bwd)


# ---------------------------------------------------------------------------
# pairwise distances


def pairwise_distances(f: Tensor) -> Tensor:
    """Euclidean distance matrix between the rows of ``f`` ``[L, d]``.

    Distances are exact (no epsilon inside the square root); the gradient
    of a zero-distance pair is defined as zero, which keeps duplicated rows
    well-behaved.
    """
    if f.ndim != 2:
        raise ValueError(f"pairwise_distances expects [L, d], got {f.shape}")
    diff = f.data[:, None, :] - f.data[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))

    def bwd(g):
        w = g + g.T
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(dist > 0, w / dist, 0.0)
        return (w.sum(axis=1)[:, None] * f.data - w @ f.data,)

    return _record("pairwise_distances", (f,), dist, bwd)
