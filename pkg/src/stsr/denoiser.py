"""Conditional noise predictor for the reverse diffusion process.

Data flow for one call ``model(x_t, t, y, h)``:

1. ``y`` (LR stack) is nearest-upsampled to the HR grid and encoded.
2. ``h`` (histology) passes through the hierarchical conditioner.
3. The two feature grids are modulated against each other, disentangled
   and fused into a conditioning tensor, or simply concatenated and
   projected when modulation is switched off.
4. A small encoder-decoder over ``concat(x_t, cond)`` with skip
   connections predicts the noise. The conditioning is injected at the
   input and, block-averaged, at every encoder stage; a sinusoidal
   timestep embedding is added at every stage; the gene graph runs at the
   bottleneck.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from . import numerics as nx
from .crossmodal import CrossModalBlock, DisentangledSet, Fuser, cm_dis_loss, dis_ratio
from .genegraph import GeneGraph
from .histocond import HistologyConditioner
from .nn import Conv2d, GroupNorm, Linear, Module
from .numerics import Tensor
from .schedule import NoiseSchedule, q_sample


@dataclass(frozen=True)
class DenoiserConfig:
    n_genes: int = 4
    hr_size: int = 32
    lr_size: int = 8
    hist_size: int = 64
    hist_channels: int = 3
    base_channels: int = 16
    depth: int = 2
    cond_width: int = 16
    time_embed_dim: int = 32
    d: int = 16
    d_t: int = 16
    d_c: int = 16
    region: int = 4
    patch_px: int = 16
    graph_features: int = 32
    graph_alpha: float = 0.2
    graph_activation: str = "relu"
    tau_mode: str = "mean"
    groups: int = 4
    use_modulation: bool = True
    use_graph: bool = True
    use_hierarchical: bool = True

    def channels(self):
        return [self.base_channels * min(2 ** i, 2) for i in range(self.depth + 1)]

    def validate(self) -> None:
        if self.hr_size % self.lr_size:
            raise ValueError(f"lr_size {self.lr_size} must divide hr_size {self.hr_size}")
        if self.hr_size % (2 ** self.depth):
            raise ValueError(f"hr_size {self.hr_size} not divisible by 2**depth")
        ratio = self.hist_size // self.hr_size
        if self.hist_size % self.hr_size or ratio & (ratio - 1):
            raise ValueError("hist_size must be a power-of-two multiple of hr_size")
        if self.hist_size % self.patch_px:
            raise ValueError(f"patch_px {self.patch_px} must divide hist_size {self.hist_size}")
        if self.hr_size % self.region:
            raise ValueError(f"region {self.region} must divide hr_size {self.hr_size}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.channels()[-1] % self.n_genes:
            raise ValueError("bottleneck channels must split evenly over genes")


def timestep_features(t, dim: int) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class TimestepEmbedding(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.fc1 = Linear(dim, 2 * dim, rng)
        self.fc2 = Linear(2 * dim, dim, rng)

    def __call__(self, t) -> Tensor:
        feats = Tensor._wrap(timestep_features(t, self.dim))
        return self.fc2(nx.silu(self.fc1(feats)))


class ResBlock(Module):
    def __init__(self, cin: int, cout: int, tdim: int, groups: int, rng: np.random.Generator):
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.norm1 = GroupNorm(cout, groups)
        self.temb = Linear(tdim, cout, rng)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.norm2 = GroupNorm(cout, groups)
        self.skip = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = nx.silu(self.norm1(self.conv1(x)))
        h = nx.add_channel_bias(h, self.temb(temb))
        h = nx.silu(self.norm2(self.conv2(h)))
        return nx.add(h, self.skip(x) if self.skip is not None else x)


class STEncoder(Module):
    def __init__(self, n_genes: int, d: int, factor: int, rng: np.random.Generator):
        self.factor = factor
        self.conv1 = Conv2d(n_genes, d, 3, rng)
        self.conv2 = Conv2d(d, d, 3, rng)

    def __call__(self, y: Tensor) -> Tensor:
        x = nx.upsample_nearest(y, self.factor)
        return self.conv2(nx.silu(self.conv1(x)))


class Denoiser(Module):
    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ch = cfg.channels()
        n_down = int(round(math.log2(cfg.hist_size // cfg.hr_size)))

        self.histo = HistologyConditioner(cfg.hist_channels, cfg.d_t, cfg.d_c, cfg.d, cfg.d,
                                          n_down, cfg.patch_px, rng)
        self.st_enc = STEncoder(cfg.n_genes, cfg.d, cfg.hr_size // cfg.lr_size, rng)
        self.cross = CrossModalBlock(cfg.d, cfg.region, rng)
        self.fuse = Fuser(cfg.d, cfg.cond_width, rng)
        self.concat_proj = Conv2d(2 * cfg.d, cfg.cond_width, 1, rng)

        self.time = TimestepEmbedding(cfg.time_embed_dim, rng)
        self.conv_in = Conv2d(cfg.n_genes + cfg.cond_width, ch[0], 3, rng)
        self.enc = [ResBlock(ch[0], ch[0], cfg.time_embed_dim, cfg.groups, rng)]
        self.down = []
        self.cond_in = []
        for i in range(1, cfg.depth + 1):
            self.down.append(Conv2d(ch[i - 1], ch[i], 3, rng, stride=2))
            self.cond_in.append(Conv2d(cfg.cond_width, ch[i], 1, rng))
            self.enc.append(ResBlock(ch[i], ch[i], cfg.time_embed_dim, cfg.groups, rng))
        self.dec = []
        for i in range(cfg.depth, 0, -1):
            self.dec.append(ResBlock(ch[i] + ch[i - 1], ch[i - 1], cfg.time_embed_dim, cfg.groups, rng))
        bottleneck = cfg.hr_size // 2 ** cfg.depth
        self.graph = GeneGraph(cfg.n_genes, ch[-1], bottleneck, cfg.graph_features, cfg.graph_alpha,
                               rng, cfg.graph_activation, cfg.tau_mode)
        self.conv_out = Conv2d(ch[0], cfg.n_genes, 3, rng, zero=True)
        self.gamma = 0.0

    # ------------------------------------------------------------ pieces

    def _check_inputs(self, x_t, y, h):
        c = self.cfg
        B = x_t.shape[0]
        want = {"x_t": (B, c.n_genes, c.hr_size, c.hr_size),
                "y": (B, c.n_genes, c.lr_size, c.lr_size),
                "h": (B, c.hist_channels, c.hist_size, c.hist_size)}
        for name, arr in (("x_t", x_t), ("y", y), ("h", h)):
            if tuple(arr.shape) != want[name]:
                raise nx.ShapeError(f"{name}: expected {want[name]}, got {tuple(arr.shape)}")

    def condition(self, y, h):
        """Conditioning tensor (B, cond_width, H, W) and the disentangled set (or None)."""
        c = self.cfg
        f_h = self.histo(nx.as_tensor(h), self.gamma, hierarchical=c.use_hierarchical)
        f_y = self.st_enc(nx.as_tensor(y))
        if not c.use_modulation:
            return self.concat_proj(nx.concat([f_h, f_y], axis=1)), None
        ds = self.cross(f_h, f_y)
        return self.fuse(ds), ds

    def __call__(self, x_t, t, y, h):
        """Predicted noise (Tensor) and the disentangled set (None without modulation)."""
        c = self.cfg
        x_t = nx.as_tensor(x_t)
        self._check_inputs(x_t, np.asarray(getattr(y, "data", y)), np.asarray(getattr(h, "data", h)))
        t = np.broadcast_to(np.atleast_1d(np.asarray(t)), (x_t.shape[0],))
        if np.any(t < 1) or np.any(t != np.floor(t)):
            raise ValueError(f"timesteps must be positive integers, got {t}")
        cond, ds = self.condition(y, h)
        temb = self.time(t)

        x = self.conv_in(nx.concat([x_t, cond], axis=1))
        skips = [self.enc[0](x, temb)]
        x = skips[0]
        for i in range(c.depth):
            x = self.down[i](x)
            x = nx.add(x, self.cond_in[i](nx.avg_pool(cond, 2 ** (i + 1))))
            x = self.enc[i + 1](x, temb)
            skips.append(x)
        if c.use_graph:
            x = self.graph(x)
        for j, block in enumerate(self.dec):
            skip = skips[c.depth - 1 - j]
            x = block(nx.concat([nx.upsample_nearest(x, 2), skip], axis=1), temb)
        return self.conv_out(x), ds

    def predict_noise(self, x_t, t, y, h) -> np.ndarray:
        with nx.no_grad():
            eps, _ = self(x_t, t, y, h)
        return eps.data


def training_loss(model: Denoiser, x0: np.ndarray, y: np.ndarray, h: np.ndarray,
                  schedule: NoiseSchedule, lambda_dis: float, rng: np.random.Generator,
                  t: Optional[np.ndarray] = None, noise: Optional[np.ndarray] = None,
                  dis_eps: float = 1e-6) -> Dict:
    """``mean (eps - eps_hat)^2 + lambda * L_dis`` with its parts.

    Returns a dict with the differentiable ``loss`` plus float ``mse``,
    ``dis`` and ``ratio`` entries. ``t`` and ``noise`` are drawn from ``rng``
    unless given.
    """
    if lambda_dis < 0:
        raise ValueError("lambda_dis must be >= 0")
    B = x0.shape[0]
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=B)
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    x_t = np.stack([q_sample(x0[b], int(t[b]), noise[b], schedule) for b in range(B)])
    eps_hat, ds = model(x_t, t, y, h)
    mse = nx.mean(nx.mul(nx.sub(eps_hat, Tensor._wrap(noise)), nx.sub(eps_hat, Tensor._wrap(noise))))
    out = {"mse": mse.item(), "dis": 0.0, "ratio": float("nan")}
    loss = mse
    if ds is not None:
        dis = cm_dis_loss(ds, dis_eps)
        out["dis"] = dis.item()
        out["ratio"] = dis_ratio(ds)
        if lambda_dis > 0:
            loss = nx.add(loss, nx.mul(dis, lambda_dis))
    out["loss"] = loss
    return out


def config_dict(cfg: DenoiserConfig) -> dict:
    return asdict(cfg)
