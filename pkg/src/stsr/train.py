"""Training loop, checkpoints, sampling and evaluation helpers."""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import config as C
from . import numerics as nx
from .data import (STStack, degrade, generate_dataset, load_container, norm_constants, normalize,
                   pcc, per_gene_metrics, rmse, save_container, write_csv)
from .denoiser import Denoiser, training_loss
from .histocond import gamma_at, patch_sets
from .optim import AdamW
from .schedule import NoiseSchedule, make_schedule, sample, scaled_linear

LOG_FIELDS = ["epoch", "gamma", "lr", "loss", "mse", "dis", "ratio", "selected"]


class CheckpointMismatchError(ValueError):
    """Checkpoint was written under a different configuration."""


@dataclass
class Dataset:
    """Paired stacks in model space plus the constants needed to undo it.

    ``x0`` and ``y`` live in [-1, 1] (per-gene min-max, then ``2u - 1``);
    ``h`` is the RGB histology in [0, 1].
    """

    x0: np.ndarray
    y: np.ndarray
    h: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    genes: List[str]
    loadings: Optional[np.ndarray] = None

    def __len__(self):
        return self.x0.shape[0]

    def unit(self) -> np.ndarray:
        return (self.x0 + 1.0) / 2.0

    def subset(self, idx) -> "Dataset":
        L = None if self.loadings is None else self.loadings[idx]
        return Dataset(self.x0[idx], self.y[idx], self.h[idx], self.lo, self.hi, self.genes, L)


def to_model_space(hr: np.ndarray, hist: np.ndarray, sr: int, lo=None, hi=None, genes=None,
                   loadings=None) -> Dataset:
    if lo is None:
        lo, hi = norm_constants(hr)
    xn = np.stack([normalize(a, lo, hi) for a in hr])
    yn = np.stack([degrade(STStack(np.maximum(a, 0.0)), sr).data for a in xn])
    genes = genes or [f"gene{i}" for i in range(hr.shape[1])]
    return Dataset(2 * xn - 1, 2 * yn - 1, np.asarray(hist, dtype=float), lo, hi, genes, loadings)


def raw_samples(cfg: C.RunConfig, n: int, offset: int = 0):
    """``n`` raw samples; ``offset`` shifts the seed so held-out sets never overlap."""
    spec = cfg.data_spec()
    spec = type(spec)(**{**spec.__dict__, "seed": cfg.data_seed + offset})
    samples = generate_dataset(spec, n)
    hr = np.stack([s[0].data for s in samples])
    hist = np.stack([s[1].data for s in samples])
    L = np.stack([s[2] for s in samples])
    return hr, hist, L, samples[0][0].genes


def build_dataset(cfg: C.RunConfig, n: Optional[int] = None) -> Dataset:
    hr, hist, L, genes = raw_samples(cfg, n or cfg.n_train)
    return to_model_space(hr, hist, cfg.sr_factor, genes=genes, loadings=L)


def make_noise_schedule(cfg: C.RunConfig) -> NoiseSchedule:
    if cfg.beta_schedule == "scaled_linear":
        return scaled_linear(cfg.T, cfg.beta_start, cfg.beta_end)
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


class Trainer:
    """Owns model, optimiser, data and RNG; ``train(k)`` runs ``k`` more epochs.

    The learning-rate and curriculum horizons are ``cfg.epochs``, so
    training ``k`` epochs, checkpointing and resuming for ``m`` more retraces
    a single ``k + m`` run exactly.
    """

    def __init__(self, cfg: C.RunConfig, data: Optional[Dataset] = None):
        self.cfg = cfg.validate()
        self.model = Denoiser(cfg.model_config(), seed=cfg.seed)
        self.opt = AdamW(self.model.named_parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                         eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
        self.schedule = make_noise_schedule(cfg)
        self.data = data if data is not None else build_dataset(cfg)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.epoch = 0
        self.log: List[Dict] = []

    # ------------------------------------------------------------ schedule

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.cfg.steps_per_epoch

    def lr_at(self, step: int) -> float:
        if self.cfg.lr_schedule == "constant" or self.total_steps == 0:
            return self.cfg.lr
        return self.cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / self.total_steps))

    def gamma(self, epoch: Optional[int] = None) -> float:
        e = self.epoch if epoch is None else epoch
        return gamma_at(self.cfg.curriculum(), min(e, max(self.cfg.epochs - 1, 0)))

    def selected_count(self, gamma: float) -> int:
        sets = patch_sets(self.data.h, self.cfg.patch_px, gamma)
        return int(sum(ps.selected.sum() for ps in sets))

    # ------------------------------------------------------------ loop

    def _batches(self):
        n, B = len(self.data), self.cfg.batch_size
        order = self.rng.permutation(n)
        for k in range(self.cfg.steps_per_epoch):
            yield order[(k * B + np.arange(B)) % n]

    def run_epoch(self) -> Dict:
        cfg = self.cfg
        if self.epoch >= cfg.epochs:
            raise ValueError(f"epoch budget {cfg.epochs} exhausted")
        g = self.gamma()
        self.model.gamma = g
        sums = {"loss": 0.0, "mse": 0.0, "dis": 0.0, "ratio": 0.0}
        for k, idx in enumerate(self._batches()):
            self.opt.lr = self.lr_at(self.epoch * cfg.steps_per_epoch + k)
            d = self.data
            out = training_loss(self.model, d.x0[idx], d.y[idx], d.h[idx], self.schedule,
                                cfg.lambda_dis, self.rng, dis_eps=cfg.dis_eps)
            self.opt.zero_grad()
            out["loss"].backward()
            self.opt.step()
            sums["loss"] += out["loss"].item()
            for key in ("mse", "dis", "ratio"):
                sums[key] += out[key]
        row = {"epoch": self.epoch, "gamma": g, "lr": self.opt.lr,
               **{k: v / cfg.steps_per_epoch for k, v in sums.items()},
               "selected": self.selected_count(g)}
        self.epoch += 1
        self.log.append(row)
        return row

    def train(self, epochs: Optional[int] = None, log_path=None, verbose: bool = False) -> List[Dict]:
        todo = self.cfg.epochs - self.epoch if epochs is None else epochs
        rows = []
        for _ in range(todo):
            t0 = time.perf_counter()
            rows.append(self.run_epoch())
            if verbose:
                r = rows[-1]
                print(f"epoch {r['epoch']:4d}  loss {r['loss']:.5f}  mse {r['mse']:.5f}  "
                      f"dis {r['dis']:.4f}  gamma {r['gamma']:.3f}  {time.perf_counter() - t0:.1f}s",
                      flush=True)
        if log_path is not None:
            write_log(log_path, self.log)
        return rows

    # ------------------------------------------------------------ state

    def snapshot(self) -> Dict:
        """Deep in-memory copy of every piece of mutable state."""
        return {"weights": self.model.state_dict(),
                "m": copy.deepcopy(self.opt.state.m), "v": copy.deepcopy(self.opt.state.v),
                "adam_step": self.opt.state.step, "epoch": self.epoch,
                "rng": copy.deepcopy(self.rng.bit_generator.state), "log": copy.deepcopy(self.log),
                "config_hash": self.cfg.hash()}

    def restore(self, snap: Dict) -> None:
        if snap["config_hash"] != self.cfg.hash():
            raise CheckpointMismatchError(
                f"checkpoint hash {snap['config_hash']} != config hash {self.cfg.hash()}")
        self.model.load_state_dict(snap["weights"])
        self.opt.state.m = {k: np.array(v, dtype=float) for k, v in snap["m"].items()}
        self.opt.state.v = {k: np.array(v, dtype=float) for k, v in snap["v"].items()}
        self.opt.state.step = int(snap["adam_step"])
        self.epoch = int(snap["epoch"])
        self.rng.bit_generator.state = copy.deepcopy(snap["rng"])
        self.log = copy.deepcopy(snap["log"])
        self.model.gamma = self.gamma()

    def save(self, path, dtype: str = "<f4") -> None:
        """Checkpoint to a container. ``dtype="<f8"`` makes disk resumes exact."""
        snap = self.snapshot()
        tensors = {f"model/{k}": v for k, v in snap["weights"].items()}
        tensors.update({f"adam_m/{k}": v for k, v in snap["m"].items()})
        tensors.update({f"adam_v/{k}": v for k, v in snap["v"].items()})
        meta = {"kind": "checkpoint", "epoch": snap["epoch"], "adam_step": snap["adam_step"],
                "rng": _jsonable(snap["rng"]), "log": snap["log"], "config_hash": snap["config_hash"],
                "config": C.dumps(self.cfg), "norm_min": self.data.lo.tolist(),
                "norm_max": self.data.hi.tolist(), "genes": self.data.genes}
        save_container(path, tensors, meta, dtype=dtype)

    @classmethod
    def load(cls, path, cfg: Optional[C.RunConfig] = None, data: Optional[Dataset] = None) -> "Trainer":
        tensors, meta = read_checkpoint(path)
        if cfg is None:
            cfg = C.parse(meta["config"]).validate()
        tr = cls(cfg, data)

        def group(prefix):
            return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

        tr.restore({"weights": group("model/"), "m": group("adam_m/"), "v": group("adam_v/"),
                    "adam_step": meta["adam_step"], "epoch": meta["epoch"], "rng": meta["rng"],
                    "log": meta["log"], "config_hash": meta["config_hash"]})
        return tr


def _jsonable(state):
    return json.loads(json.dumps(state, default=int))


def read_checkpoint(path):
    tensors, meta = load_container(path)
    if meta.get("kind") != "checkpoint":
        raise CheckpointMismatchError(f"{path} is not a checkpoint")
    return tensors, meta


def write_log(path, rows: Sequence[Dict]) -> None:
    write_csv(path, LOG_FIELDS, [[repr(float(r[k])) if k not in ("epoch", "selected") else r[k]
                                  for k in LOG_FIELDS] for r in rows])


# ---------------------------------------------------------------- inference


def predict(model: Denoiser, schedule: NoiseSchedule, y: np.ndarray, h: np.ndarray, seed: int,
            clip: bool = True, batch: int = 16) -> np.ndarray:
    """Sampled HR stacks in model space for LR inputs ``y`` (B, N, h, w)."""
    cfg = model.cfg
    out = []
    for s in range(0, y.shape[0], batch):
        yb, hb = y[s:s + batch], h[s:s + batch]
        shape = (yb.shape[0], cfg.n_genes, cfg.hr_size, cfg.hr_size)
        out.append(sample(model.predict_noise, yb, hb, schedule, seed=seed + s, shape=shape,
                          clip=(-1.0, 1.0) if clip else None))
    return np.concatenate(out, axis=0)


def evaluate(pred_unit: np.ndarray, truth_unit: np.ndarray, genes: Sequence[str]) -> List[List]:
    """Metric rows: pooled first, then one per gene. Inputs on the [0, 1] scale."""
    rows = [["pooled", rmse(pred_unit, truth_unit), pcc(pred_unit, truth_unit)]]
    for g, (r, p) in zip(genes, per_gene_metrics(pred_unit, truth_unit)):
        rows.append([g, r, p])
    return rows


def eval_mse(model: Denoiser, data: Dataset, schedule: NoiseSchedule, seed: int = 123) -> float:
    """Noise-matching MSE averaged over every timestep with fixed noise."""
    rng = np.random.default_rng(seed)
    B = len(data)
    tot = []
    with nx.no_grad():
        for t in range(1, schedule.T + 1):
            out = training_loss(model, data.x0, data.y, data.h, schedule, 0.0, rng,
                                t=np.full(B, t))
            tot.append(out["mse"])
    return float(np.mean(tot))


def model_gradcheck(cfg: C.RunConfig, max_coords: Optional[int] = 6, seed: int = 0,
                    eps: float = 1e-5) -> Dict[str, float]:
    """Finite-difference check of the full training loss, per parameter tensor.

    Zero-initialised layers are re-drawn first so every gradient path is live.
    Returns the worst relative error per parameter name.
    """
    cfg = cfg.validate()
    model = Denoiser(cfg.model_config(), seed=seed)
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        if not np.any(p.data):
            p.data[...] = rng.normal(0.0, 0.1, p.data.shape)
    data = build_dataset(cfg, 1)
    sched = make_noise_schedule(cfg)
    t = np.array([max(1, cfg.T // 2)])
    noise = rng.standard_normal(data.x0.shape)
    model.gamma = cfg.gamma_min

    def loss():
        return training_loss(model, data.x0, data.y, data.h, sched, max(cfg.lambda_dis, 0.1), rng,
                             t=t, noise=noise, dis_eps=cfg.dis_eps)["loss"]

    out = {}
    for name, p in model.named_parameters():
        out[name] = nx.grad_check_params(loss, [p], eps=eps, max_coords=max_coords,
                                         rng=np.random.default_rng([seed, len(out)]))
    return out
