"""Run configuration: one flat record with every hyper-parameter.

Files are UTF-8 ``key = value`` lines; ``#`` starts a comment. Command-line
overrides use ``--key value``. Unknown keys are rejected so typos fail
loudly instead of silently training with defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, Iterable, List, Optional

import numpy as np

from .data import SyntheticSpec
from .denoiser import DenoiserConfig
from .genegraph import GeneGraph
from .histocond import CurriculumSchedule


class ConfigError(ValueError):
    """Unknown key, unparsable value or failed validation."""


@dataclass(frozen=True)
class RunConfig:
    # data
    n_genes: int = 4
    n_programs: int = 2
    hr_size: int = 32
    sr_factor: int = 4
    hist_size: int = 64
    hist_channels: int = 3
    n_train: int = 2
    block_strength: float = 1.5
    cross_strength: float = 0.0
    data_noise: float = 0.05
    data_seed: int = 0
    # model
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
    # diffusion
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    beta_schedule: str = "scaled_linear"
    lambda_dis: float = 0.1
    dis_eps: float = 1e-6
    # curriculum
    gamma_min: float = 0.0
    gamma_max: float = 5.5
    # optimisation
    epochs: int = 200
    steps_per_epoch: int = 10
    batch_size: int = 4
    lr: float = 2e-3
    lr_schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    seed: int = 0
    # sampling
    sample_seed: int = 1
    clip: bool = True

    # ------------------------------------------------------------ derived

    @property
    def lr_size(self) -> int:
        return self.hr_size // self.sr_factor

    @property
    def n_patches(self) -> int:
        return (self.hist_size // self.patch_px) ** 2

    def model_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            n_genes=self.n_genes, hr_size=self.hr_size, lr_size=self.lr_size,
            hist_size=self.hist_size, hist_channels=self.hist_channels,
            base_channels=self.base_channels, depth=self.depth, cond_width=self.cond_width,
            time_embed_dim=self.time_embed_dim, d=self.d, d_t=self.d_t, d_c=self.d_c,
            region=self.region, patch_px=self.patch_px, graph_features=self.graph_features,
            graph_alpha=self.graph_alpha, graph_activation=self.graph_activation,
            tau_mode=self.tau_mode, groups=self.groups, use_modulation=self.use_modulation,
            use_graph=self.use_graph, use_hierarchical=self.use_hierarchical)

    def data_spec(self) -> SyntheticSpec:
        return SyntheticSpec(n_genes=self.n_genes, n_programs=self.n_programs,
                             hr_size=self.hr_size, sr_factor=self.sr_factor,
                             hist_size=self.hist_size, block_strength=self.block_strength,
                             cross_strength=self.cross_strength, noise=self.data_noise,
                             seed=self.data_seed)

    def curriculum(self) -> CurriculumSchedule:
        return CurriculumSchedule(self.gamma_min, self.gamma_max, max(self.epochs, 1))

    # ------------------------------------------------------------ checks

    def validate(self) -> "RunConfig":
        def need(ok, msg):
            if not ok:
                raise ConfigError(msg)

        need(self.hr_size % self.sr_factor == 0, "sr_factor must divide hr_size")
        need(self.n_programs <= self.n_genes, "n_programs must be <= n_genes")
        need(self.T >= 1, "T must be >= 1")
        need(0 < self.beta_start <= self.beta_end < 1, "need 0 < beta_start <= beta_end < 1")
        need(self.beta_schedule in ("linear", "scaled_linear"), "beta_schedule: linear|scaled_linear")
        need(self.lr_schedule in ("constant", "cosine"), "lr_schedule: constant|cosine")
        need(self.lambda_dis >= 0, "lambda_dis must be >= 0")
        need(self.dis_eps > 0, "dis_eps must be > 0")
        need(self.gamma_min <= self.gamma_max, "gamma_min must be <= gamma_max")
        need(0 <= self.graph_alpha <= 1, "graph_alpha must lie in [0, 1]")
        need(self.epochs >= 0 and self.steps_per_epoch >= 1, "epochs >= 0, steps_per_epoch >= 1")
        need(self.batch_size >= 1 and self.n_train >= 1, "batch_size and n_train must be >= 1")
        need(self.lr > 0 and self.adam_eps > 0 and self.weight_decay >= 0, "bad optimiser values")
        need(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "adam betas must lie in [0, 1)")
        try:
            self.model_config().validate()
            self.data_spec().validate()
            ch = self.model_config().channels()[-1]
            # the graph layer checks its own geometry; build a throwaway instance
            GeneGraph(self.n_genes, ch, self.hr_size // 2 ** self.depth, self.graph_features,
                      self.graph_alpha, np.random.default_rng(0))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def hash(self) -> str:
        """Digest of every field; the epoch budget sets the LR and curriculum horizons."""
        d = asdict(self)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def desk() -> RunConfig:
    """CPU-sized profile; the dataclass defaults."""
    return RunConfig()


def full() -> RunConfig:
    """Full-scale profile.

    Geometry is adjusted to integer-compatible sizes: HR 260 with a 10x
    factor gives the 26 px LR map, 16 x 16 patches of 260 px give M = 256,
    and a 26 px region tiles the HR grid.
    """
    return RunConfig(
        n_genes=25, n_programs=5, hr_size=260, sr_factor=10, hist_size=4160, patch_px=260,
        base_channels=50, cond_width=128, time_embed_dim=128, d=128, d_t=128, d_c=128,
        region=26, graph_features=676, graph_alpha=0.2, T=1000, beta_schedule="linear",
        epochs=200, batch_size=4, lr=1e-4, lr_schedule="constant", beta1=0.9, beta2=0.999,
        adam_eps=1e-8, weight_decay=1e-5)


PROFILES = {"desk": desk, "full": full}

_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, text: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = type(getattr(RunConfig(), key))
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_pairs(lines: Iterable[str]) -> Dict[str, object]:
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def parse(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Config from file contents. A ``profile`` key picks the base profile."""
    lines = text.splitlines()
    profile = None
    rest = []
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        key, sep, value = line.partition("=")
        if sep and key.strip() == "profile":
            profile = value.strip()
        else:
            rest.append(raw)
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        base = PROFILES[profile]()
    return replace(base or RunConfig(), **parse_pairs(rest))


def dumps(cfg: RunConfig) -> str:
    lines = []
    for name in _FIELDS:
        v = getattr(cfg, name)
        lines.append(f"{name} = {repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: RunConfig, args: List[str]) -> RunConfig:
    """Apply ``--key value`` pairs."""
    pairs: Dict[str, object] = {}
    i = 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--"):
            raise ConfigError(f"expected --key, got {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"missing value for --{key}")
            value = args[i + 1]
            i += 2
        pairs[key] = _coerce(key, value)
    return replace(cfg, **pairs)


def load(path: Optional[str], overrides: List[str] = (), profile: str = "desk") -> RunConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    cfg = PROFILES[profile]()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg = parse(fh.read(), base=cfg)
    return apply_overrides(cfg, list(overrides)).validate()


def smallest() -> RunConfig:
    """Tiny config used by gradient checks: HR 16, two genes, width 8."""
    return replace(RunConfig(), n_genes=2, n_programs=2, hr_size=16, sr_factor=4, hist_size=32,
                   patch_px=8, base_channels=8, cond_width=8, time_embed_dim=8, d=8, d_t=8,
                   d_c=8, region=4, graph_features=32, groups=2, T=10)

