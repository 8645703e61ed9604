"""Hierarchical cell-to-tissue histology features.

The histology image is tiled into cell-scale patches, each scored by the
Shannon entropy of its grey-level histogram. Patches whose entropy exceeds
a threshold gamma (raised linearly over training) are encoded and attended
to from every position of the tissue-level feature grid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np

from . import numerics as nx
from .nn import Conv2d, Module
from .numerics import Tensor


@dataclass(frozen=True)
class HistologyImage:
    """Histology image, ``data`` shaped (channels, height, width) in [0, 1]."""

    data: np.ndarray
    scale: float = 0.5  # micrometers per pixel

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] not in (1, 3):
            raise ValueError(f"histology must be (1|3, H, W), got {arr.shape}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class PatchSet:
    patches: np.ndarray  # (M, channels, p, p), row-major tiling order
    complexity: np.ndarray  # (M,) entropy in bits
    selected: np.ndarray  # (M,) bool
    grid: tuple  # (rows, cols) of the tiling

    @property
    def M(self) -> int:
        return self.patches.shape[0]


@dataclass(frozen=True)
class CurriculumSchedule:
    gamma_min: float = 0.0
    gamma_max: float = 4.0
    total_epochs: int = 200

    def __post_init__(self):
        if self.gamma_min > self.gamma_max:
            raise ValueError("gamma_min must not exceed gamma_max")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


def entropy(patch) -> float:
    """Base-2 Shannon entropy of the 256-bin grey-level histogram.

    Multi-channel input (C, H, W) is averaged to grey first; a 2-D array is
    taken as already grey.
    """
    arr = np.asarray(patch, dtype=np.float64)
    gray = arr.mean(axis=0) if arr.ndim == 3 else arr
    bins = np.clip((gray.reshape(-1) * 256).astype(np.int64), 0, 255)
    counts = np.bincount(bins, minlength=256)
    p = counts[counts > 0] / counts.sum()
    return float(max(0.0, -(p * np.log2(p)).sum()))


def crop_patches(h: HistologyImage, patch_px: int) -> PatchSet:
    """Non-overlapping row-major tiling into ``patch_px`` squares."""
    C, H, W = h.data.shape
    if patch_px < 1 or H % patch_px or W % patch_px:
        raise ValueError(f"image {H}x{W} is not divisible into {patch_px}px patches")
    r, c = H // patch_px, W // patch_px
    patches = (h.data.reshape(C, r, patch_px, c, patch_px)
               .transpose(1, 3, 0, 2, 4)
               .reshape(r * c, C, patch_px, patch_px))
    patches = np.ascontiguousarray(patches)
    complexity = np.array([entropy(p) for p in patches])
    return PatchSet(patches, complexity, np.ones(r * c, dtype=bool), (r, c))


def assemble_patches(ps: PatchSet) -> np.ndarray:
    r, c = ps.grid
    M, C, p, _ = ps.patches.shape
    return ps.patches.reshape(r, c, C, p, p).transpose(2, 0, 3, 1, 4).reshape(C, r * p, c * p)


def gamma_at(sched: CurriculumSchedule, epoch: int) -> float:
    if not 0 <= epoch < sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside 0..{sched.total_epochs - 1}")
    if sched.total_epochs == 1:
        return sched.gamma_min
    frac = epoch / (sched.total_epochs - 1)
    return sched.gamma_min + (sched.gamma_max - sched.gamma_min) * frac


def select_patches(ps: PatchSet, gamma: float) -> PatchSet:
    """Keep patches with entropy strictly above ``gamma``; never return an empty set."""
    mask = ps.complexity > gamma
    if not mask.any():
        mask = np.zeros_like(mask)
        mask[int(np.argmax(ps.complexity))] = True
    return replace(ps, selected=mask)


class TissueEncoder(Module):
    """Stride-2 conv stages from histology resolution down to the feature grid."""

    def __init__(self, in_ch: int, d_t: int, n_down: int, rng: np.random.Generator,
                 zero_last: bool = False):
        self.downs = []
        c = in_ch
        for _ in range(n_down):
            self.downs.append(Conv2d(c, d_t, 3, rng, stride=2))
            c = d_t
        self.out = Conv2d(c, d_t, 3, rng, zero=zero_last)
        self.d_t = d_t

    def __call__(self, h: Tensor) -> Tensor:
        x = h
        for conv in self.downs:
            x = nx.silu(conv(x))
        return self.out(x)


class CellEncoder(Module):
    """Shared-weight patch encoder followed by global mean pooling."""

    def __init__(self, in_ch: int, d_c: int, rng: np.random.Generator, zero_last: bool = False):
        self.conv1 = Conv2d(in_ch, d_c, 3, rng, stride=2)
        self.conv2 = Conv2d(d_c, d_c, 3, rng, stride=2, zero=zero_last)
        self.d_c = d_c

    def __call__(self, patches: Tensor) -> Tensor:
        x = nx.silu(self.conv1(patches))
        x = self.conv2(x)
        m, c = x.shape[:2]
        return nx.mean(nx.reshape(x, (m, c, -1)), axis=2)


class CrossAttention(Module):
    """softmax(Q K^T / sqrt(d)) V with Q from tissue pixels and K, V from cell vectors."""

    def __init__(self, d_t: int, d_c: int, d: int, rng: np.random.Generator):
        self.W_Q = nx.parameter(rng.normal(0, 1 / np.sqrt(d_t), (d_t, d)))
        self.W_K = nx.parameter(rng.normal(0, 1 / np.sqrt(d_c), (d_c, d)))
        self.W_V = nx.parameter(rng.normal(0, 1 / np.sqrt(d_c), (d_c, d_t)))
        self.d_t, self.d_c, self.d = d_t, d_c, d

    def __call__(self, f_tissue: Tensor, f_cell: Tensor) -> Tensor:
        """``f_tissue`` (d_t, Hg, Wg), ``f_cell`` (m, d_c) -> (d_t, Hg, Wg)."""
        if f_tissue.ndim != 3 or f_tissue.shape[0] != self.d_t:
            raise nx.ShapeError(f"tissue features {f_tissue.shape} need {self.d_t} channels")
        if f_cell.ndim != 2 or f_cell.shape[1] != self.d_c:
            raise nx.ShapeError(f"cell features {f_cell.shape} need {self.d_c} channels")
        d_t, Hg, Wg = f_tissue.shape
        q_in = nx.transpose(nx.reshape(f_tissue, (d_t, Hg * Wg)))
        q = nx.matmul(q_in, self.W_Q)
        k = nx.matmul(f_cell, self.W_K)
        v = nx.matmul(f_cell, self.W_V)
        att = nx.softmax_rows(nx.mul(nx.matmul(q, nx.transpose(k)), 1.0 / np.sqrt(self.d)))
        out = nx.matmul(att, v)
        return nx.reshape(nx.transpose(out), (d_t, Hg, Wg))


def patch_sets(h_batch: np.ndarray, patch_px: int, gamma: float) -> List[PatchSet]:
    return [select_patches(crop_patches(HistologyImage(h), patch_px), gamma) for h in h_batch]


class HistologyConditioner(Module):
    """Tissue features refined by cross-attention over curriculum-selected patches.

    With ``hierarchical=False`` only the tissue branch runs.
    """

    def __init__(self, in_ch: int, d_t: int, d_c: int, d: int, out_ch: int, n_down: int,
                 patch_px: int, rng: np.random.Generator):
        self.tissue = TissueEncoder(in_ch, d_t, n_down, rng)
        self.cells = CellEncoder(in_ch, d_c, rng)
        self.attn = CrossAttention(d_t, d_c, d, rng)
        self.proj = Conv2d(d_t, out_ch, 1, rng)
        self.patch_px = patch_px

    def __call__(self, h: Tensor, gamma: float, hierarchical: bool = True,
                 sets: Optional[List[PatchSet]] = None) -> Tensor:
        f_t = self.tissue(h)
        if not hierarchical:
            return self.proj(f_t)
        if sets is None:
            sets = patch_sets(h.data, self.patch_px, gamma)
        chosen = [ps.patches[ps.selected] for ps in sets]
        counts = [len(c) for c in chosen]
        f_c = self.cells(Tensor._wrap(np.concatenate(chosen, axis=0)))
        fused, start = [], 0
        for b, n in enumerate(counts):
            cell_b = nx.getitem(f_c, slice(start, start + n))
            start += n
            tissue_b = nx.getitem(f_t, b)
            fused.append(nx.add(tissue_b, self.attn(tissue_b, cell_b)))
        return self.proj(nx.stack(fused, axis=0))
