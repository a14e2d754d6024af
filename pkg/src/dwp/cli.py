"""Command-line entry point: ``dwp <subcommand> [--config PATH] [--seed N] [--out DIR] [--dry-run]``.

Exit codes: 0 on success, 2 on a configuration error, 3 on numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from . import plotting, vi
from .errors import ConfigError, DivergenceError, FormatError
from .kernels import (harvest_kernels, load_checkpoint, load_kernels, network_checkpoint,
                      network_from_checkpoint, prune_small_norm, save_checkpoint, save_kernels,
                      vae_checkpoint, vae_from_checkpoint)
from .vae import train_vae

log = logging.getLogger("dwp")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE = 0, 2, 3


def _config(args, experiment: str | None = None) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    if experiment is not None:
        cfg.experiment = experiment
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    ex.validate_config(cfg)
    return cfg


def _dry_run(cfg: ex.ExperimentConfig, grid: list[dict]) -> int:
    print(json.dumps({"experiment": cfg.experiment, "seed": cfg.seed, "out_dir": cfg.out_dir,
                      "cells": len(grid), "grid": grid}, indent=2))
    return EXIT_OK


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required")
    return value


# -- subcommands --------------------------------------------------------------------------------

def cmd_train_source(args) -> int:
    cfg = _config(args)
    p = cfg.prior
    grid = [{"source_index": i, "width": p.source_width, "epochs": p.source_epochs, "l2": p.source_l2}
            for i in range(p.source_models)]
    if args.dry_run:
        return _dry_run(cfg, grid)
    out = Path(cfg.out_dir)
    for i, m in enumerate(ex.train_source_models(cfg, cfg.seed)):
        path = out / f"source{i}.dwpc"
        save_checkpoint(network_checkpoint(m, source_index=i, seed=cfg.seed), path)
        print(path)
    return EXIT_OK


def cmd_harvest(args) -> int:
    ckpts = _require(args.checkpoints, "--checkpoints")
    out = Path(args.out or ".")
    if args.dry_run:
        print(json.dumps({"checkpoints": ckpts, "layer": args.layer}))
        return EXIT_OK
    models = [network_from_checkpoint(load_checkpoint(c)) for c in ckpts]
    ds = harvest_kernels(models, args.layer, model_ids=[str(c) for c in ckpts])
    k = ds.kernel_size
    path = out / f"kernels{k}x{k}.dwpk"
    save_kernels(ds, path)
    print(f"{path}: {len(ds)} kernels")
    return EXIT_OK


def cmd_prune(args) -> int:
    src = Path(_require(args.kernels, "--kernels"))
    ds = load_kernels(src)
    if args.dry_run:
        print(json.dumps({"kernels": str(src), "n": len(ds), "factor": args.factor}))
        return EXIT_OK
    pruned = prune_small_norm(ds, factor=args.factor)
    path = Path(args.out or src.parent) / f"{src.stem}_pruned.dwpk"
    save_kernels(pruned, path)
    print(f"{path}: kept {len(pruned)} of {len(ds)} (threshold {pruned.meta['pruning']['threshold']:.4g})")
    return EXIT_OK


def cmd_train_prior(args) -> int:
    cfg = _config(args)
    src = Path(_require(args.kernels, "--kernels"))
    ds = load_kernels(src)
    k = ds.kernel_size
    vcfg = cfg.prior.vae_config(k, cfg.seed)
    if args.dry_run:
        return _dry_run(cfg, [{"kernels": str(src), "n": len(ds), "kernel_size": k, "z_dim": vcfg.z_dim,
                               "epochs": vcfg.epochs}])
    res = train_vae(ds.kernels, vcfg)
    path = Path(cfg.out_dir) / f"vae{k}x{k}.dwpc"
    save_checkpoint(vae_checkpoint(res.model, kernels=str(src), seed=cfg.seed, best_epoch=res.best_epoch), path)
    print(f"{path}: best epoch {res.best_epoch}, val elbo {res.history[res.best_epoch]['val_elbo']:.4f}")
    return EXIT_OK


def cmd_vi_train(args) -> int:
    cfg = _config(args)
    n, prior_kind, seed = cfg.train_sizes[0], cfg.priors[0], cfg.seeds[0]
    if args.dry_run:
        return _dry_run(cfg, [{"train_size": n, "prior": prior_kind, "seed": seed, "epochs": cfg.epochs}])
    out = Path(cfg.out_dir)
    train, test = ex.load_data(cfg.target)
    test = ex._test_set(cfg, test)
    needs = prior_kind in ("gaussian-ml", "dwp") or cfg.init != "xavier"
    artifacts = ex.build_prior_artifacts(cfg, cfg.seed, out / "cache") if needs else None
    acc, res = ex.classification_cell((cfg, train, test, artifacts, n, prior_kind, seed, cfg.seed))
    trace = out / "trace.csv"
    ex._write_csv(trace, list(vi.TRACE_COLUMNS), [[r[c] for c in vi.TRACE_COLUMNS] for r in res.trace])
    save_checkpoint(network_checkpoint(res.model, prior=prior_kind, seed=seed, train_size=n), out / "vi_model.dwpc")
    plotting.plot_trace(trace)
    print(f"{trace}: final test accuracy {acc:.4f}")
    return EXIT_OK


def _driver(experiment: str, run, plot):
    def cmd(args) -> int:
        cfg = _config(args, experiment)
        if args.dry_run:
            return _dry_run(cfg, ex.plan(cfg))
        paths = run(cfg, out=cfg.out_dir, master_seed=cfg.seed)
        for path in paths if isinstance(paths, list) else [paths]:
            plot(path)
            print(path)
        return EXIT_OK
    return cmd


def _plot_convergence(path: Path):
    return plotting.plot_convergence(path, "test ELBO" if path.stem.endswith("vae") else "test accuracy")


def cmd_sample_prior(args) -> int:
    vae = vae_from_checkpoint(load_checkpoint(_require(args.vae, "--vae")))
    if args.dry_run:
        print(json.dumps({"vae": args.vae, "n": args.n, "kernel_size": vae.kernel_size}))
        return EXIT_OK
    out = Path(args.out or ".")
    path = ex.export_prior_samples(vae, args.n, out / f"prior_samples{vae.kernel_size}x{vae.kernel_size}.dwpk",
                                   seed=args.seed or 0)
    if args.n:
        plotting.plot_kernel_grid(load_kernels(path).kernels, path.with_suffix(".png"))
    print(path)
    return EXIT_OK


def cmd_embed(args) -> int:
    vae = vae_from_checkpoint(load_checkpoint(_require(args.vae, "--vae")))
    ds = load_kernels(_require(args.kernels, "--kernels"))
    if args.dry_run:
        print(json.dumps({"vae": args.vae, "kernels": args.kernels, "n": len(ds)}))
        return EXIT_OK
    path = ex.export_embeddings(vae, ds.kernels, Path(args.out or ".") / "embeddings.csv")
    plotting.plot_embeddings(path)
    print(path)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON); defaults are used when omitted")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--dry-run", action="store_true", help="validate and print the planned work, then exit")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="dwp", description="Variational inference with deep weight priors.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        return p

    add("train-source", cmd_train_source, "train deterministic source networks")
    p = add("harvest", cmd_harvest, "collect one conv layer's kernels from checkpoints")
    p.add_argument("--checkpoints", nargs="+")
    p.add_argument("--layer", type=int, default=0)
    p = add("prune", cmd_prune, "drop small-norm kernels from a kernel dataset")
    p.add_argument("--kernels")
    p.add_argument("--factor", type=float, default=0.1, help="threshold as a fraction of the median norm")
    p = add("train-prior", cmd_train_prior, "fit a kernel VAE on a kernel dataset")
    p.add_argument("--kernels")
    add("vi-train", cmd_vi_train, "one variational training run with a metrics trace")
    add("classify-exp", _driver("classification", ex.run_classification, plotting.plot_classification),
        "accuracy per training-set size and prior")
    add("features-exp", _driver("features", ex.run_random_features, plotting.plot_features),
        "random-feature accuracy per width and init mode")
    add("convergence-exp", _driver("convergence", ex.run_convergence, _plot_convergence),
        "training curves per init mode")
    add("gap", _driver("gap", ex.run_gap, plotting.plot_gap), "auxiliary vs importance-weighted bound")
    p = add("sample-prior", cmd_sample_prior, "export kernel samples from a trained VAE")
    p.add_argument("--vae")
    p.add_argument("-n", type=int, default=256)
    p = add("embed", cmd_embed, "export latent embeddings of kernels as CSV")
    p.add_argument("--vae")
    p.add_argument("--kernels")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
