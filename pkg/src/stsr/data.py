"""Synthetic ST/histology data, LR degradation, metrics and the container format."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .histocond import HistologyImage

MAGIC = b"DSTC"
VERSION = 1
_PREAMBLE = struct.Struct("<4sBI")


@dataclass
class STStack:
    """N-gene expression stack ``data`` shaped (N, H, W), nonnegative."""

    data: np.ndarray
    genes: List[str] = field(default_factory=list)
    scale: float = 10.0  # micrometers per pixel
    norm_min: Optional[np.ndarray] = None
    norm_max: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"STStack data must be (N, H, W), got {self.data.shape}")
        if np.any(self.data < 0):
            raise ValueError("expression values must be nonnegative")
        if not self.genes:
            self.genes = [f"gene{i}" for i in range(self.data.shape[0])]
        if len(self.genes) != self.data.shape[0]:
            raise ValueError("one gene name per channel required")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class SyntheticSpec:
    n_genes: int = 4
    n_programs: int = 2
    hr_size: int = 32
    sr_factor: int = 4
    hist_size: int = 64
    smoothness: float = 3.0  # Gaussian sigma of the latent fields, HR pixels
    block_strength: float = 1.5
    cross_strength: float = 0.0
    noise: float = 0.05
    cell_radius: float = 3.0  # Poisson-disc spacing of nuclei, histology pixels
    loading: Optional[Tuple[Tuple[float, ...], ...]] = None
    seed: int = 0

    def validate(self) -> None:
        if self.n_genes < 1 or self.n_programs < 1:
            raise ValueError("need at least one gene and one program")
        if self.n_programs > self.n_genes:
            raise ValueError(f"K={self.n_programs} programs exceed N={self.n_genes} genes")
        if self.sr_factor < 1 or self.hr_size % self.sr_factor:
            raise ValueError(f"sr_factor {self.sr_factor} must divide hr_size {self.hr_size}")
        if self.hist_size % self.hr_size:
            raise ValueError("hist_size must be a multiple of hr_size")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.loading is not None and np.shape(self.loading) != (self.n_genes, self.n_programs):
            raise ValueError(f"loading must be {self.n_genes}x{self.n_programs}")


def block_of(spec: SyntheticSpec) -> np.ndarray:
    """Program (block) index per gene."""
    return np.arange(spec.n_genes) * spec.n_programs // spec.n_genes


def loading_matrix(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.loading is not None:
        return np.asarray(spec.loading, dtype=np.float64)
    blk = block_of(spec)
    L = np.full((spec.n_genes, spec.n_programs), spec.cross_strength)
    L[np.arange(spec.n_genes), blk] = spec.block_strength * rng.uniform(0.8, 1.2, spec.n_genes)
    return L


def _softplus(x):
    return np.logaddexp(0.0, x)


def _poisson_disc(rng, size, radius, density, tries=30):
    """Dart-throwing Poisson-disc sample; acceptance follows ``density`` in [0, 1]."""
    pts = []
    cell = radius / np.sqrt(2)
    gsz = int(np.ceil(size / cell))
    grid = -np.ones((gsz, gsz), dtype=np.int64)
    n_darts = int(tries * (size / radius) ** 2)
    for xy in rng.uniform(0, size, (n_darts, 2)):
        ix, iy = int(xy[0] // cell), int(xy[1] // cell)
        if grid[ix, iy] >= 0:
            continue
        if rng.uniform() > density[min(int(xy[0]), size - 1), min(int(xy[1]), size - 1)]:
            continue
        ok = True
        for gx in range(max(ix - 2, 0), min(ix + 3, gsz)):
            for gy in range(max(iy - 2, 0), min(iy + 3, gsz)):
                k = grid[gx, gy]
                if k >= 0 and np.sum((pts[k] - xy) ** 2) < radius ** 2:
                    ok = False
                    break
            if not ok:
                break
        if ok:
            grid[ix, iy] = len(pts)
            pts.append(xy)
    return np.array(pts).reshape(-1, 2)


def generate(spec: SyntheticSpec, seed: Optional[int] = None):
    """One synthetic sample: (HR STStack, HistologyImage, loading matrix).

    Gene maps are softplus of a loading-weighted sum of K smooth random
    fields plus white noise. The histology image is the normalised field sum
    at histology resolution, darkened by Poisson-disc nuclei whose density
    follows the same fields.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    S, K = spec.hr_size, spec.n_programs
    fields = np.empty((K, S, S))
    for k in range(K):
        f = gaussian_filter(rng.standard_normal((S, S)), spec.smoothness, mode="wrap")
        fields[k] = (f - f.mean()) / (f.std() + 1e-12)
    L = loading_matrix(spec, rng)
    lin = np.tensordot(L, fields, axes=(1, 0))
    if spec.noise > 0:
        lin = lin + spec.noise * rng.standard_normal(lin.shape)
    hr = STStack(_softplus(lin), [f"gene{i}" for i in range(spec.n_genes)], scale=10.0)

    up = spec.hist_size // S
    tissue = fields.sum(axis=0)
    tissue = (tissue - tissue.min()) / (tissue.max() - tissue.min() + 1e-12)
    tissue = np.repeat(np.repeat(tissue, up, axis=0), up, axis=1)
    tissue = gaussian_filter(tissue, up / 2.0)
    nuclei = np.zeros_like(tissue)
    pts = _poisson_disc(rng, spec.hist_size, spec.cell_radius, 0.15 + 0.85 * tissue)
    yy, xx = np.mgrid[0:spec.hist_size, 0:spec.hist_size]
    r_nuc = 0.45 * spec.cell_radius
    for px, py in pts:
        nuclei = np.maximum(nuclei, np.exp(-((xx - py) ** 2 + (yy - px) ** 2) / (2 * r_nuc ** 2)))
    # eosin-like background modulated by tissue, haematoxylin nuclei
    base = 0.35 + 0.5 * tissue
    rgb = np.stack([
        base * (1 - 0.55 * nuclei) + 0.1,
        0.7 * base * (1 - 0.75 * nuclei) + 0.05,
        0.6 * base + 0.35 * nuclei + 0.05,
    ])
    hist = HistologyImage(np.clip(rgb, 0.0, 1.0), scale=10.0 / up)
    return hr, hist, L


def generate_dataset(spec: SyntheticSpec, n: int):
    """``n`` samples with independent child seeds of ``spec.seed``."""
    seeds = np.random.SeedSequence(spec.seed).generate_state(n)
    return [generate(spec, int(s)) for s in seeds]


def degrade(x: STStack, s: int) -> STStack:
    """Non-overlapping ``s x s`` block mean per gene."""
    N, H, W = x.data.shape
    if s < 1 or H % s or W % s:
        raise ValueError(f"factor {s} does not divide {H}x{W}")
    lr = x.data.reshape(N, H // s, s, W // s, s).mean(axis=(2, 4))
    return STStack(lr, list(x.genes), x.scale * s, x.norm_min, x.norm_max)


def norm_constants(stacks: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    arr = np.stack([np.asarray(s) for s in stacks])
    lo = arr.min(axis=(0, 2, 3))
    hi = arr.max(axis=(0, 2, 3))
    return lo, hi


def normalize(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = np.where(hi > lo, hi - lo, 1.0)
    return (np.asarray(x) - lo[:, None, None]) / span[:, None, None]


def denormalize(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.asarray(x) * span[:, None, None] + lo[:, None, None]


# ---------------------------------------------------------------- metrics

class UndefinedVarianceError(ValueError):
    """PCC requested for an input with zero variance."""


def _arr(a):
    return np.asarray(a.data if isinstance(a, STStack) else a, dtype=np.float64)


def rmse(a, b) -> float:
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def pcc(a, b) -> float:
    a, b = _arr(a).reshape(-1), _arr(b).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    va, vb = np.dot(da, da), np.dot(db, db)
    if va == 0 or vb == 0:
        raise UndefinedVarianceError("pcc undefined for constant input")
    return float(np.clip(np.dot(da, db) / np.sqrt(va * vb), -1.0, 1.0))


def per_gene_metrics(pred, truth) -> List[Tuple[float, float]]:
    """(rmse, pcc) per gene for stacks shaped (..., N, H, W); gene axis is -3."""
    p, t = _arr(pred), _arr(truth)
    out = []
    for g in range(p.shape[-3]):
        pg, tg = p[..., g, :, :], t[..., g, :, :]
        try:
            r = pcc(pg, tg)
        except UndefinedVarianceError:
            r = float("nan")
        out.append((rmse(pg, tg), r))
    return out


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(r)


# ---------------------------------------------------------------- container

class ContainerError(Exception):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def save_container(path, tensors: Dict[str, np.ndarray], meta: Optional[dict] = None,
                   dtype: str = "<f4") -> None:
    """Write named arrays plus JSON-able metadata.

    Layout: ``DSTC`` | version u8 | header length u32 LE | UTF-8 JSON header |
    payloads back to back, little-endian, offsets relative to payload start.
    """
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    dt = _DTYPES[dtype]
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype=np.float64).astype(dt))
        raw = a.tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_container(path) -> Tuple[Dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a DSTC container")
    if len(buf) < _PREAMBLE.size:
        raise TruncatedPayloadError(f"{path}: truncated preamble")
    _, version, hlen = _PREAMBLE.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    start = _PREAMBLE.size + hlen
    if len(buf) < start:
        raise TruncatedPayloadError(f"{path}: truncated header")
    header = json.loads(buf[_PREAMBLE.size:start].decode("utf-8"))
    out = {}
    for e in header["entries"]:
        lo = start + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(buf):
            raise TruncatedPayloadError(f"{path}: entry {e['name']!r} truncated")
        dt = _DTYPES[e["dtype"]]
        out[e["name"]] = np.frombuffer(buf[lo:hi], dtype=dt).reshape(e["shape"]).astype(np.float64)
    return out, header["meta"]
