"""Dense real tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array (float64 by default,
float32 allowed for training speed). Operations executed inside an active
:class:`Tape` record a vector-Jacobian closure; :func:`backward` replays the
tape once, in reverse recording order, and accumulates gradients into the
``grad`` buffer of every leaf that requires them.

Shape discipline is strict: elementwise binary ops require identical
trailing shapes and broadcast only missing *leading* (batch) dimensions.
Size-1 stretching is rejected, because silent broadcasts are the dominant
source of transformer shape bugs.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "ShapeError", "tensor", "constant", "custom_op",
    "backward", "add", "sub", "mul", "neg", "add_scalar", "mul_scalar",
    "matmul", "transpose", "reshape", "concat", "slice_axis", "gather",
    "embedding", "tile_axis", "softmax", "layernorm", "gelu", "linear",
    "masked_mse", "conv3d", "tsum", "tmean",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_OFFSETS3 = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class Tensor:
    """Dense array with optional gradient buffer and tape node."""

    __slots__ = ("data", "grad", "node", "requires_grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.node: Optional["_TapeEntry"] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # operator sugar; scalars go through the *_scalar ops
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not part of the op family")
        return mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={'set' if self.grad is not None else 'none'})"


class _TapeEntry:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out: Tensor, parents: tuple, vjp: Callable):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of ops; single-owner during forward and backward."""

    _active: Optional["Tape"] = None

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        Tape._active = self
        return self

    def __exit__(self, *exc):
        # entry.out <-> out.node is a reference cycle over large buffers;
        # break it here so saved activations free by refcount, not gc
        Tape._active = None
        for entry in self.entries:
            if entry.out is not None:
                entry.out.node = None
            entry.out = None
            entry.parents = ()
            entry.vjp = None
        self.entries.clear()
        return False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad."""
        if loss.node is None:
            raise ValueError("loss was not recorded on this tape")
        if loss.data.shape != ():
            raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        # reverse recording order is a topological order: consumers first
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.out), None)
            if g is None:
                continue
            parent_grads = entry.vjp(g)
            for parent, pg in zip(entry.parents, parent_grads):
                if pg is None or not isinstance(parent, Tensor):
                    continue
                if not (parent.requires_grad or parent.node is not None):
                    continue
                if parent.node is None:
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg
                else:
                    acc = grads.get(id(parent))
                    if acc is None:
                        grads[id(parent)] = np.array(pg, copy=True) if np.isscalar(pg) else pg.copy()
                    else:
                        acc += pg


def backward(loss: Tensor) -> None:
    """Run reverse-mode on the tape that recorded ``loss``."""
    tape = Tape._active
    if tape is None:
        raise RuntimeError("backward requires the recording tape to be active")
    tape.backward(loss)


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    arr = np.array(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def constant(data, dtype=np.float64) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def _tracked(*parents) -> bool:
    if Tape._active is None:
        return False
    return any(isinstance(p, Tensor) and (p.requires_grad or p.node is not None) for p in parents)


def custom_op(out_data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    """Wrap a forward result as a recorded op.

    ``vjp(grad_out)`` must return one gradient array (or None) per parent.
    This is the extension hook used by the attention ops.
    """
    out = Tensor(out_data)
    if _tracked(*parents):
        out.requires_grad = True
        entry = _TapeEntry(out, parents, vjp)
        out.node = entry
        Tape._active.entries.append(entry)
    return out


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the parent's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_elementwise(a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if small != big[len(big) - len(small):]:
        raise ShapeError(f"elementwise shapes {sa} and {sb} do not align on trailing dims")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b)
    out = a.data + b.data
    return custom_op(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b)
    out = a.data - b.data
    return custom_op(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b)
    out = a.data * b.data
    return custom_op(out, (a, b), lambda g: (_reduce_to(g * b.data, a.shape),
                                             _reduce_to(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return custom_op(a.data + s, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    return custom_op(a.data * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    Inner extents must agree exactly; leading batch dims follow numpy
    broadcasting. Inner-dim mismatch is always an error, never a broadcast.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul batch dims incompatible: {a.shape} @ {b.shape}") from e

    def vjp(g):
        da = _reduce_to(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        db = _reduce_to(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return da, db

    return custom_op(out, (a, b), vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op(np.transpose(a.data, axes), (a,),
                     lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return custom_op(np.reshape(a.data, shape), (a,), lambda g: (np.reshape(g, old),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)

    def vjp(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return custom_op(out, tuple(parts), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        return (buf,)

    return custom_op(np.ascontiguousarray(a.data[idx]), (a,), vjp)


def gather(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select rows along ``axis`` by integer index (duplicates allowed)."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, idx, axis=axis)

    def vjp(g):
        buf = np.zeros_like(a.data)
        moved = np.moveaxis(buf, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (buf,)

    return custom_op(out, (a,), vjp)


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup into an embedding table; gather by another name."""
    return gather(table, indices, axis=0)


def tile_axis(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis of extent ``n`` at ``axis`` by repetition."""
    out = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return custom_op(out, (a,), lambda g: (g.sum(axis=axis),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; -inf entries map to exact zeros."""
    x = a.data
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - dot),)

    return custom_op(y, (a,), vjp)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return custom_op(out, (x, gain, bias), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return custom_op(out, (x,), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map on the last axis: x @ w + b with w of shape (in, out)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: x {x.shape} incompatible with w {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} must be ({w.shape[1]},)")
    x2 = x.data.reshape(-1, w.shape[0])
    out = (x2 @ w.data + b.data).reshape(x.shape[:-1] + (w.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        dx = (g2 @ w.data.T).reshape(x.shape)
        dw = x2.T @ g2
        db = g2.sum(axis=0)
        return dx, dw, db

    return custom_op(out, (x, w, b), vjp)


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over the True entries of a boolean mask."""
    target = np.asarray(target)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeError(f"masked_mse shapes differ: {pred.shape}, {target.shape}, {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("masked_mse over an empty mask")
    diff = np.where(mask, pred.data - target, 0.0)
    out = np.array((diff * diff).sum() / count)

    def vjp(g):
        return (g * 2.0 * diff / count,)

    return custom_op(out, (pred,), vjp)


def conv3d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3x3 convolution, stride 1, zero padding 1 (shape preserving).

    ``x`` is (C_in, D, H, W) or batched (N, C_in, D, H, W); ``w`` is
    (C_out, C_in, 3, 3, 3); ``b`` is (C_out,).
    """
    batched = x.ndim == 5
    if not batched and x.ndim != 4:
        raise ShapeError(f"conv3d input must be rank 4 or 5, got {x.shape}")
    if w.ndim != 5 or w.shape[2:] != (3, 3, 3):
        raise ShapeError(f"conv3d kernel must be (C_out, C_in, 3, 3, 3), got {w.shape}")
    cin_axis = 1 if batched else 0
    if x.shape[cin_axis] != w.shape[1]:
        raise ShapeError(f"conv3d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv3d bias must be ({w.shape[0]},)")

    xd = x.data if batched else x.data[None]
    n, cin, dd, hh, ww = xd.shape
    cout = w.shape[0]
    vox = dd * hh * ww

    # im2col in two stages: carve the (small) w-offset planes first, then
    # take (d, h) windows whose copies run over contiguous h*w blocks
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    planes = [np.ascontiguousarray(xp[..., k:k + ww]) for k in range(3)]
    col = np.empty((n, cin, 27, dd, hh, ww), dtype=xd.dtype)
    for p, (i, j, k) in enumerate(_OFFSETS3):
        col[:, :, p] = planes[k][:, :, i:i + dd, j:j + hh]
    col2 = col.reshape(n, cin * 27, vox)
    w2 = np.ascontiguousarray(w.data.reshape(cout, cin * 27))
    out = np.matmul(w2, col2).reshape(n, cout, dd, hh, ww)
    out += b.data[None, :, None, None, None]

    def vjp(g):
        gb = (g if batched else g[None]).reshape(n, cout, vox)
        db = gb.sum(axis=(0, 2))
        dw2 = np.zeros((cout, cin * 27), dtype=gb.dtype)
        for ni in range(n):  # transposed-view GEMMs; BLAS takes B^T without a copy
            dw2 += np.matmul(gb[ni], col2[ni].T)
        dcol = np.matmul(w2.T, gb).reshape(n, cin, 27, dd, hh, ww)
        dplanes = [np.zeros_like(planes[0]) for _ in range(3)]
        for p, (i, j, k) in enumerate(_OFFSETS3):
            dplanes[k][:, :, i:i + dd, j:j + hh] += dcol[:, :, p]
        dxp = np.zeros_like(xp)
        for k in range(3):
            dxp[..., k:k + ww] += dplanes[k]
        dx = dxp[:, :, 1:-1, 1:-1, 1:-1]
        return (dx if batched else dx[0]), np.ascontiguousarray(dw2.reshape(w.shape)), db

    return custom_op(out if batched else out[0], (x, w, b), vjp)


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    shape = a.shape
    return custom_op(np.array(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape).astype(a.dtype, copy=True),))


def tmean(a: Tensor) -> Tensor:
    """Mean of all entries, as a scalar tensor."""
    n = a.data.size
    shape = a.shape
    return custom_op(np.array(a.data.mean()), (a,),
                     lambda g: ((np.broadcast_to(g, shape) / n).astype(a.dtype, copy=True),))
