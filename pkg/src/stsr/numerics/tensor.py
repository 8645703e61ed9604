"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a closure mapping
the output adjoint to parent adjoints. Nodes carry a creation index drawn
from a global counter, so sorting the reachable subgraph by that index in
descending order replays the tape in reverse recording order.

Broadcasting is deliberately absent: binary elementwise ops require equal
shapes (python scalars are allowed), and the only broadcasting adds are the
explicit bias helpers :func:`fc` and :func:`add_channel_bias`.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import kernels

Number = Union[int, float]

_counter = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._id = next(_counter)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal constructor; skips the defensive copy
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t._id = next(_counter)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise ShapeError(f"seed shape {grad.shape} != output shape {self.shape}")
        if not self.requires_grad:
            return

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            for p in node._parents:
                if p.requires_grad and p._id not in nodes:
                    stack.append(p)

        adj = {self._id: grad}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = adj.pop(nid, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._id in adj:
                    adj[p._id] = adj[p._id] + pg
                else:
                    adj[p._id] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _record(out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    t = Tensor._wrap(out)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    return t


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        a = as_tensor(a)
        return _record(a.data + c, (a,), lambda g: (g,))
    a = as_tensor(a)
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    a = as_tensor(a)
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        a = as_tensor(a)
        return _record(a.data * c, (a,), lambda g: (g * c,))
    a = as_tensor(a)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    a = as_tensor(a)
    if b.size == 1 and a.size != 1:
        # scalar-tensor denominator; needed for ratio losses
        bd = b.data.reshape(())
        out = a.data / bd

        def back(g):
            return g / bd, np.reshape(-(g * a.data).sum() / bd**2, b.shape)

        return _record(out, (a, b), back)
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    return _record(ad / bd, (a, b), lambda g: (g / bd, -g * ad / bd**2))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    xd = x.data
    return _record(xd * sig, (x,), lambda g: (g * (sig + xd * sig * (1.0 - sig)),))


def activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return {"relu": relu, "silu": silu}[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched product of 3-D operands
    with equal leading (batch) dimension."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul: unsupported ranks for shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def back(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _record(ad @ bd, (a, b), back)


def fc(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ W + b`` with ``b`` added to every row."""
    if x.ndim != 2 or W.ndim != 2 or b.shape != (W.shape[1],):
        raise ShapeError(f"fc: shapes x{x.shape} W{W.shape} b{b.shape} do not conform")
    if x.shape[1] != W.shape[0]:
        raise ShapeError(f"fc: shapes x{x.shape} and W{W.shape} do not conform")
    xd, Wd = x.data, W.data

    def back(g):
        return g @ Wd.T, xd.T @ g, g.sum(axis=0)

    return _record(xd @ Wd + b.data, (x, W, b), back)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        if x.ndim != 2:
            raise ShapeError("transpose without axes needs a 2-D tensor")
        axes = (1, 0)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(src),))


def flatten(x: Tensor, start: int = 1) -> Tensor:
    return reshape(x, x.shape[:start] + (-1,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along {axis}: {exc}") from None
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(out, tensors, back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record(out, tensors, back)


def getitem(x: Tensor, idx) -> Tensor:
    src = x.shape

    def back(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _record(x.data[idx], (x,), back)


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(np.asarray(out), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def l2norm(x: Tensor) -> Tensor:
    """Frobenius norm of the whole tensor; the adjoint at zero is taken as 0."""
    xd = x.data
    nrm = float(np.sqrt(np.sum(xd * xd)))

    def back(g):
        if nrm == 0.0:
            return (np.zeros_like(xd),)
        return (g * xd / nrm,)

    return _record(np.asarray(nrm), (x,), back)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with row-max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), back)


# ---------------------------------------------------------------- image ops

def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` of shape (C,) or (B, C) to every pixel of ``x`` (B, C, H, W)."""
    if x.ndim != 4:
        raise ShapeError(f"add_channel_bias: need (B,C,H,W), got {x.shape}")
    B, C = x.shape[:2]
    if b.shape == (C,):
        bb = b.data[None, :, None, None]

        def back(g):
            return g, g.sum(axis=(0, 2, 3))
    elif b.shape == (B, C):
        bb = b.data[:, :, None, None]

        def back(g):
            return g, g.sum(axis=(2, 3))
    else:
        raise ShapeError(f"add_channel_bias: bias {b.shape} vs features {x.shape}")
    return _record(x.data + bb, (x, b), back)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation, NCHW input and OIHW weights."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and weight {w.shape} do not conform")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} for {w.shape[0]} output channels")
    kh, kw = w.shape[2:]
    H, W = x.shape[2:]
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")
    xd, wd = x.data, w.data
    out = kernels.conv2d_forward(xd, wd, stride, padding)
    if b is not None:
        out += b.data[None, :, None, None]
        parents = (x, w, b)
    else:
        parents = (x, w)

    def back(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_backward_input(g, wd, xd.shape, stride, padding) if x.requires_grad else None
        gw = kernels.conv2d_backward_weight(g, xd, wd.shape, stride, padding) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _record(out, parents, back)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def back(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return _record(out, (x,), back)


def avg_pool(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping ``factor`` x ``factor`` block mean over the last two axes."""
    if factor == 1:
        return x
    B, C, H, W = x.shape
    if H % factor or W % factor:
        raise ShapeError(f"avg_pool: {H}x{W} not divisible by {factor}")
    h, w = H // factor, W // factor
    out = x.data.reshape(B, C, h, factor, w, factor).mean(axis=(3, 5))
    scale = 1.0 / (factor * factor)

    def back(g):
        return (np.repeat(np.repeat(g * scale, factor, axis=2), factor, axis=3),)

    return _record(out, (x,), back)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    B, C, H, W = x.shape
    if C % groups:
        raise ShapeError(f"group_norm: {C} channels not divisible into {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm: affine params must be ({C},)")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(B, C, H, W)
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx_hat = (g * gd).reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        n = xh.shape[2]
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=2, keepdims=True)
                        - xh * (gx_hat * xh).sum(axis=2, keepdims=True))
        return gx.reshape(B, C, H, W), ggamma, gbeta

    return _record(out, (x, gamma, beta), back)
