"""Figures rendered next to the experiment CSVs.

Each ``plot_*`` function reads one driver output and writes a PNG with the
same stem beside it. The CSVs stay the primary interface; figures are a
convenience for a quick look.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    se = v.std(ddof=1) / np.sqrt(len(v)) if len(v) > 1 else 0.0
    return float(v.mean()), float(se)


def _grouped(rows, x_key, group_key, y_key, x_type=float):
    groups = defaultdict(lambda: defaultdict(list))
    for r in rows:
        groups[r[group_key]][x_type(r[x_key])].append(float(r[y_key]))
    return groups


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _errorbar_plot(csv_path, x_key, group_key, xlabel, ylabel, logx=False) -> Path:
    csv_path = Path(csv_path)
    groups = _grouped(read_csv(csv_path), x_key, group_key, "test_acc")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, series in sorted(groups.items()):
            xs = sorted(series)
            stats = [_mean_se(series[x]) for x in xs]
            ax.errorbar(xs, [m for m, _ in stats], yerr=[s for _, s in stats], marker="o", ms=3, capsize=2, label=name)
        if logx:
            ax.set_xscale("log", base=2 if x_key == "k" else 10)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend()
        return _save(fig, csv_path.with_suffix(".png"))


def plot_classification(csv_path) -> Path:
    """Mean test accuracy (with standard error) against training-set size, one line per prior."""
    return _errorbar_plot(csv_path, "train_size", "prior", "training examples", "test accuracy", logx=True)


def plot_features(csv_path) -> Path:
    """Random-feature accuracy against width scale, one line per init mode."""
    return _errorbar_plot(csv_path, "k", "init", "width scale k", "test accuracy", logx=True)


def plot_convergence(csv_path, ylabel: str = "test accuracy") -> Path:
    """Mean metric per step with a one-standard-error band, one line per init mode."""
    csv_path = Path(csv_path)
    groups = _grouped(read_csv(csv_path), "step", "init", "metric", int)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, series in sorted(groups.items()):
            xs = sorted(series)
            stats = np.array([_mean_se(series[x]) for x in xs])
            ax.plot(xs, stats[:, 0], label=name)
            ax.fill_between(xs, stats[:, 0] - stats[:, 1], stats[:, 0] + stats[:, 1], alpha=0.2)
        ax.set_xlabel("optimizer step")
        ax.set_ylabel(ylabel)
        ax.legend()
        return _save(fig, csv_path.with_suffix(".png"))


def plot_kernel_grid(kernels: np.ndarray, path, cols: int = 16, max_kernels: int = 128) -> Path:
    """Kernels as a grid of small images, each scaled to its own range."""
    kernels = np.asarray(kernels)[:max_kernels]
    rows = max(1, int(np.ceil(len(kernels) / cols)))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(cols * 0.4, rows * 0.4), squeeze=False)
        for ax in axes.flat:
            ax.axis("off")
        for ax, k in zip(axes.flat, kernels):
            ax.imshow(k, cmap="gray", interpolation="nearest")
        fig.subplots_adjust(wspace=0.05, hspace=0.05)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_embeddings(csv_path) -> Path:
    """Scatter of the first two latent coordinates."""
    csv_path = Path(csv_path)
    rows = read_csv(csv_path)
    z = np.array([[float(r["z0"]), float(r.get("z1", 0.0))] for r in rows]) if rows else np.zeros((0, 2))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.4))
        ax.scatter(z[:, 0], z[:, 1], s=2, alpha=0.4)
        ax.set_xlabel("z0")
        ax.set_ylabel("z1")
        return _save(fig, csv_path.with_suffix(".png"))


def plot_trace(csv_path) -> Path:
    """Bound value and accuracies per epoch of a variational training run."""
    csv_path = Path(csv_path)
    rows = read_csv(csv_path)
    epochs = [int(r["epoch"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
        a1.plot(epochs, [float(r["aux_elbo"]) for r in rows])
        a1.set_xlabel("epoch")
        a1.set_ylabel("bound")
        a2.plot(epochs, [float(r["train_acc"]) for r in rows], label="train")
        a2.plot(epochs, [float(r["test_acc"]) for r in rows], label="test")
        a2.set_xlabel("epoch")
        a2.set_ylabel("accuracy")
        a2.legend()
        return _save(fig, csv_path.with_suffix(".png"))


def plot_gap(json_path) -> Path:
    """Bar chart of the three bounds in a gap report."""
    json_path = Path(json_path)
    doc = json.loads(json_path.read_text())
    names = ["iwae_elbo", "aux_elbo", "aux_elbo_prior_reverse"]
    means = [doc[n]["mean"] for n in names]
    ses = [doc[n]["se"] for n in names]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(range(3), means, yerr=ses, capsize=3)
        ax.set_xticks(range(3))
        ax.set_xticklabels([f"IWAE K={doc['k']}", "aux (learned r)", "aux (r = p(z))"])
        ax.set_ylabel("nats")
        return _save(fig, json_path.with_suffix(".png"))
