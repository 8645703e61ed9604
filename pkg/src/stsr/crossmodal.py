"""Cross-modal adaptive modulation and the shared/unique disentangling head.

Both feature grids are cut into non-overlapping ``a x a`` regions, one per
channel. For a target region ``A`` and its counterpart ``B`` in the other
modality, a fully connected layer maps the flattened correlation ``A^T B``
to an ``a x a`` filter ``w`` and the region becomes ``A w``. The FC is
shared across channels and regions; each direction has its own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .nn import Conv2d, Linear, Module
from .numerics import Tensor


@dataclass
class DisentangledSet:
    U_h: Tensor
    U_y: Tensor
    S_h: Tensor
    S_y: Tensor


def check_pair(f_h: Tensor, f_y: Tensor, a: int) -> None:
    if f_h.shape != f_y.shape:
        raise nx.ShapeError(f"feature grids differ: {f_h.shape} vs {f_y.shape}")
    H, W = f_h.shape[-2:]
    if H % a or W % a:
        raise nx.ShapeError(f"grid {H}x{W} not divisible by region size {a}")


def to_regions(x: Tensor, a: int) -> Tensor:
    """(B, C, H, W) -> (B*C*(H/a)*(W/a), a, a), regions in row-major order."""
    B, C, H, W = x.shape
    t = nx.reshape(x, (B, C, H // a, a, W // a, a))
    t = nx.transpose(t, (0, 1, 2, 4, 3, 5))
    return nx.reshape(t, (-1, a, a))


def from_regions(r: Tensor, shape) -> Tensor:
    B, C, H, W = shape
    a = r.shape[-1]
    t = nx.reshape(r, (B, C, H // a, W // a, a, a))
    t = nx.transpose(t, (0, 1, 2, 4, 3, 5))
    return nx.reshape(t, (B, C, H, W))


def modulate(target: Tensor, other: Tensor, W_fc: Tensor, b_fc: Tensor) -> Tensor:
    """Filter each target region by ``FC(target^T other)``.

    ``target`` and ``other`` are stacks of regions shaped (n, a, a);
    ``W_fc`` is (a*a, a*a) and ``b_fc`` (a*a,).
    """
    if target.shape != other.shape or target.ndim != 3 or target.shape[1] != target.shape[2]:
        raise nx.ShapeError(f"region stacks {target.shape} and {other.shape} do not conform")
    n, a, _ = target.shape
    if W_fc.shape != (a * a, a * a) or b_fc.shape != (a * a,):
        raise nx.ShapeError(f"FC shapes {W_fc.shape}, {b_fc.shape} for region size {a}")
    gram = nx.matmul(nx.transpose(target, (0, 2, 1)), other)
    w = nx.reshape(nx.fc(nx.reshape(gram, (n, a * a)), W_fc, b_fc), (n, a, a))
    return nx.matmul(target, w)


class Modulation(Module):
    """One modulation direction; starts close to the identity filter."""

    def __init__(self, a: int, rng: np.random.Generator, init_scale: float = 0.01):
        self.a = a
        self.fc = Linear(a * a, a * a, rng, zero=True)
        self.fc.weight.data[...] = rng.normal(0, init_scale, (a * a, a * a))
        self.fc.bias.data[...] = np.eye(a).reshape(-1)

    def __call__(self, target: Tensor, other: Tensor) -> Tensor:
        check_pair(target, other, self.a)
        out = modulate(to_regions(target, self.a), to_regions(other, self.a),
                       self.fc.weight, self.fc.bias)
        return from_regions(out, target.shape)


class CrossModalBlock(Module):
    """Bidirectional modulation followed by four 1x1 disentangling heads."""

    def __init__(self, d: int, a: int, rng: np.random.Generator):
        self.h2y = Modulation(a, rng)
        self.y2h = Modulation(a, rng)
        self.u_h = Conv2d(d, d, 1, rng)
        self.s_h = Conv2d(d, d, 1, rng)
        self.u_y = Conv2d(d, d, 1, rng)
        self.s_y = Conv2d(d, d, 1, rng)

    def modulate_pair(self, f_h: Tensor, f_y: Tensor):
        return self.y2h(f_h, f_y), self.h2y(f_y, f_h)

    def disentangle(self, m_h: Tensor, m_y: Tensor) -> DisentangledSet:
        return DisentangledSet(self.u_h(m_h), self.u_y(m_y), self.s_h(m_h), self.s_y(m_y))

    def __call__(self, f_h: Tensor, f_y: Tensor) -> DisentangledSet:
        return self.disentangle(*self.modulate_pair(f_h, f_y))


def cm_dis_loss(ds: DisentangledSet, eps: float = 1e-6) -> Tensor:
    """``||S_y - S_h|| / (||U_y - U_h|| + eps)`` as a differentiable scalar."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    num = nx.l2norm(nx.sub(ds.S_y, ds.S_h))
    den = nx.add(nx.l2norm(nx.sub(ds.U_y, ds.U_h)), eps)
    return nx.div(num, den)


def dis_ratio(ds: DisentangledSet) -> float:
    """Unguarded ratio ``||S_y - S_h|| / ||U_y - U_h||`` for monitoring."""
    num = np.linalg.norm(ds.S_y.data - ds.S_h.data)
    den = np.linalg.norm(ds.U_y.data - ds.U_h.data)
    return float(num / den) if den > 0 else float("inf")


class Fuser(Module):
    """Concatenate [(S_h + S_y)/2, U_h, U_y] and project to the conditioning width."""

    def __init__(self, d: int, width: int, rng: np.random.Generator, zero: bool = False):
        self.proj = Conv2d(3 * d, width, 1, rng, zero=zero)

    def __call__(self, ds: DisentangledSet) -> Tensor:
        shared = nx.mul(nx.add(ds.S_h, ds.S_y), 0.5)
        return self.proj(nx.concat([shared, ds.U_h, ds.U_y], axis=1))
