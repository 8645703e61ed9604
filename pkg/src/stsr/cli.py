"""Command-line entry point: ``stsr <command> [options] [--key value ...]``.

Commands: ``train``, ``sample``, ``eval``, ``gradcheck``, ``gen-data`` and
``ablate``. Trailing ``--key value`` pairs override config-file entries.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import config as C
from . import numerics as nx
from .data import (ContainerError, STStack, degrade, load_container, normalize, save_container,
                   write_csv)
from .train import (CheckpointMismatchError, Dataset, Trainer, evaluate, model_gradcheck,
                    predict, raw_samples, read_checkpoint, to_model_space)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_MISMATCH = 5
EXIT_GRADCHECK = 6
EXIT_SHAPE = 7

VARIANTS = {
    "full": {},
    "w/o CAM": {"use_modulation": False},
    "w/o CIGC-Graph": {"use_graph": False},
    "w/o hierarchical": {"use_hierarchical": False},
}


def _config(args, overrides: Sequence[str]) -> C.RunConfig:
    return C.load(args.config, overrides, profile=args.profile)


def _dataset_from_file(path, sr: int, lo=None, hi=None) -> Dataset:
    tensors, meta = load_container(path)
    if meta.get("kind") != "dataset":
        raise ContainerError(f"{path} is not a dataset container")
    return to_model_space(tensors["hr"], tensors["hist"], sr, lo, hi, meta.get("genes"))


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, overrides) -> int:
    cfg = _config(args, overrides)
    hr, hist, L, genes = raw_samples(cfg, args.n, offset=args.offset)
    lr = np.stack([degrade(STStack(a), cfg.sr_factor).data for a in hr])
    spec = cfg.data_spec()
    meta = {"kind": "dataset", "genes": genes, "hr_scale": 10.0, "lr_scale": 10.0 * cfg.sr_factor,
            "hist_scale": 10.0 * cfg.hr_size / cfg.hist_size, "sr_factor": cfg.sr_factor,
            "spec": {k: v for k, v in dataclasses.asdict(spec).items() if k != "loading"},
            "offset": args.offset}
    save_container(args.out, {"hr": hr, "lr": lr, "hist": hist, "loading": L}, meta)
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def cmd_train(args, overrides) -> int:
    cfg = _config(args, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = _dataset_from_file(args.data, cfg.sr_factor) if args.data else None
    if args.resume:
        tr = Trainer.load(args.resume, cfg, data)
    else:
        tr = Trainer(cfg, data)
    stop = cfg.epochs if args.until is None else min(args.until, cfg.epochs)
    t0 = time.perf_counter()
    tr.train(max(stop - tr.epoch, 0), log_path=out / "train_log.csv", verbose=not args.quiet)
    dtype = "<f8" if args.exact else "<f4"
    tr.save(out / "checkpoint.dstc", dtype=dtype)
    (out / "config.txt").write_text(C.dumps(cfg), encoding="utf-8")
    print(f"trained to epoch {tr.epoch}/{cfg.epochs} in {time.perf_counter() - t0:.1f}s; "
          f"checkpoint {out / 'checkpoint.dstc'}")
    return EXIT_OK


def cmd_sample(args, overrides) -> int:
    if overrides:
        raise C.ConfigError(f"sample uses the checkpoint's config; got overrides {overrides}")
    _, meta = read_checkpoint(args.checkpoint)
    cfg = C.parse(meta["config"]).validate()
    tr = Trainer.load(args.checkpoint, cfg, data=_placeholder(cfg))
    lo, hi = np.array(meta["norm_min"]), np.array(meta["norm_max"])
    tensors, dmeta = load_container(args.data)
    if dmeta.get("kind") != "dataset":
        raise ContainerError(f"{args.data} is not a dataset container")
    y = 2 * np.stack([normalize(a, lo, hi) for a in tensors["lr"]]) - 1
    seed = cfg.sample_seed if args.seed is None else args.seed
    pred = predict(tr.model, tr.schedule, y, tensors["hist"], seed, clip=cfg.clip)
    unit = (pred + 1) / 2
    span = np.where(hi > lo, hi - lo, 1.0)
    raw = unit * span[None, :, None, None] + lo[None, :, None, None]
    save_container(args.out, {"pred": raw}, {"kind": "prediction", "norm_min": lo.tolist(),
                                             "norm_max": hi.tolist(), "genes": meta["genes"],
                                             "seed": seed})
    print(f"wrote {raw.shape[0]} predictions to {args.out}")
    return EXIT_OK


def _placeholder(cfg: C.RunConfig) -> Dataset:
    """Tiny dataset so a Trainer can be rebuilt for inference without regenerating data."""
    N, S, L, Hs = cfg.n_genes, cfg.hr_size, cfg.lr_size, cfg.hist_size
    z = np.zeros
    return Dataset(z((1, N, S, S)), z((1, N, L, L)), z((1, cfg.hist_channels, Hs, Hs)),
                   z(N), np.ones(N), [f"gene{i}" for i in range(N)])


def cmd_eval(args, overrides) -> int:
    if overrides:
        raise C.ConfigError(f"eval takes no config overrides: {overrides}")
    pt, pm = load_container(args.pred)
    tt, tm = load_container(args.truth)
    if pm.get("kind") != "prediction" or tm.get("kind") != "dataset":
        raise ContainerError("eval needs a prediction container and a dataset container")
    lo, hi = np.array(pm["norm_min"]), np.array(pm["norm_max"])
    pred = np.stack([normalize(a, lo, hi) for a in pt["pred"]])
    truth = np.stack([normalize(a, lo, hi) for a in tt["hr"]])
    if pred.shape != truth.shape:
        raise nx.ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    rows = evaluate(pred, truth, pm["genes"])
    write_csv(args.out, ["scope", "rmse", "pcc"], rows)
    print(f"pooled RMSE {rows[0][1]:.4f}  PCC {rows[0][2]:.4f}  -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args, overrides) -> int:
    cfg = C.smallest() if args.config is None else C.load(args.config, (), args.profile)
    cfg = C.apply_overrides(cfg, overrides).validate()
    t0 = time.perf_counter()
    errs = model_gradcheck(cfg, max_coords=args.coords, seed=args.seed)
    worst = max(errs, key=errs.get)
    print(f"checked {len(errs)} parameter tensors in {time.perf_counter() - t0:.1f}s; "
          f"max rel error {errs[worst]:.3e} ({worst})")
    return EXIT_OK if errs[worst] < args.tol else EXIT_GRADCHECK


def run_ablation(cfg: C.RunConfig, seeds: Sequence[int], n_samples: int, n_test: int,
                 verbose: bool = False) -> List[Dict]:
    """Train and score each variant for each seed on one fixed synthetic set.

    The first ``n_samples - n_test`` samples train, the rest are held out.
    Returns one dict per (variant, seed).
    """
    hr, hist, L, genes = raw_samples(cfg, n_samples)
    n_train = n_samples - n_test
    if n_train < 1 or n_test < 1:
        raise C.ConfigError("need at least one training and one test sample")
    train_set = to_model_space(hr[:n_train], hist[:n_train], cfg.sr_factor, genes=genes)
    test_set = to_model_space(hr[n_train:], hist[n_train:], cfg.sr_factor, train_set.lo,
                              train_set.hi, genes)
    runs = []
    for name, toggles in VARIANTS.items():
        for seed in seeds:
            vcfg = dataclasses.replace(cfg, seed=seed, n_train=n_train, **toggles).validate()
            t0 = time.perf_counter()
            tr = Trainer(vcfg, train_set)
            tr.train()
            pred = predict(tr.model, tr.schedule, test_set.y, test_set.h, vcfg.sample_seed,
                           clip=vcfg.clip)
            _, r, p = evaluate((pred + 1) / 2, test_set.unit(), genes)[0]
            runs.append({"variant": name, "seed": seed, "rmse": r, "pcc": p,
                         "final_mse": tr.log[-1]["mse"] if tr.log else float("nan")})
            if verbose:
                print(f"{name:18s} seed {seed}  RMSE {r:.4f}  PCC {p:.4f}  "
                      f"{time.perf_counter() - t0:.0f}s", flush=True)
    return runs


def summarize_ablation(runs: Sequence[Dict], scale: int) -> List[List]:
    rows = []
    for name in VARIANTS:
        sel = [r for r in runs if r["variant"] == name]
        rm = np.array([r["rmse"] for r in sel])
        pc = np.array([r["pcc"] for r in sel])
        rows.append([name, f"{scale}x", rm.mean(), pc.mean(), rm.std(), pc.std(), len(sel)])
    return rows


ABLATION_HEADER = ["variant", "scale", "rmse", "pcc", "rmse_sd", "pcc_sd", "seeds"]


def cmd_ablate(args, overrides) -> int:
    cfg = _config(args, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")]
    runs = run_ablation(cfg, seeds, args.n_samples, args.n_test, verbose=not args.quiet)
    write_csv(out / "ablation_runs.csv", ["variant", "seed", "rmse", "pcc", "final_mse"],
              [[r["variant"], r["seed"], r["rmse"], r["pcc"], r["final_mse"]] for r in runs])
    write_csv(out / "ablation.csv", ABLATION_HEADER, summarize_ablation(runs, cfg.sr_factor))
    print(f"wrote {out / 'ablation.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stsr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default=None, out_required=False):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--profile", default="desk", choices=sorted(C.PROFILES))
        if out_default is not None or out_required:
            sp.add_argument("--out", default=out_default, required=out_required)
        return sp

    sp = common(sub.add_parser("gen-data", help="write a synthetic dataset container"),
                out_required=True)
    sp.add_argument("--n", type=int, default=8)
    sp.add_argument("--offset", type=int, default=0, help="seed offset for held-out sets")
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("train", help="train and checkpoint"), out_default="run")
    sp.add_argument("--data", help="dataset container (default: generate from config)")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--until", type=int, help="stop after this epoch (schedule horizon unchanged)")
    sp.add_argument("--exact", action="store_true", help="store the checkpoint in 64-bit")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="predict HR stacks for a dataset container")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("eval", help="RMSE / PCC table for predictions against truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("gradcheck", help="finite-difference check of the full model"))
    sp.add_argument("--coords", type=int, default=6, help="probed coordinates per tensor")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = common(sub.add_parser("ablate", help="full model against the three toggle-off variants"),
                out_default="ablation")
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--n-samples", type=int, default=64)
    sp.add_argument("--n-test", type=int, default=16)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, overrides = parser.parse_known_args(argv)
    try:
        return args.func(args, overrides)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ContainerError as exc:
        print(f"bad container: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except CheckpointMismatchError as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except nx.ShapeError as exc:
        print(f"shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE


if __name__ == "__main__":
    sys.exit(main())
