"""Experiment configuration and drivers.

Every driver is a pure function of ``(config, master seed)``. Grid cells
derive their random streams from the master seed and the cell's labels, run
in a bounded worker pool, and are merged back in grid order, so reruns give
byte-identical CSVs regardless of the worker count.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Adam, Module, Tensor, no_grad, xavier_uniform
from .autodiff import functional as F
from .autodiff.module import Linear
from .data import LabeledDataset, load_idx, resolve_path, synth_dataset, SynthSpec
from .errors import ConfigError
from .kernels import (KernelDataset, TrainConfig, harvest_kernels, load_checkpoint, load_kernels,
                      network_checkpoint, prune_small_norm, save_checkpoint, save_kernels,
                      train_deterministic, train_source_model, vae_checkpoint, vae_from_checkpoint)
from .layers import Network, build_network, mnist_spec
from .priors import Dwp, GaussianML, LogUniform, StandardNormal, fit_gaussian_ml, PRIOR_KINDS
from .rng import stream
from .vae import VaeModel, VaeTrainConfig, embed_kernels, sample_kernels, train_vae
from . import vi

log = logging.getLogger(__name__)

EXPERIMENTS = ("classification", "features", "convergence", "gap")
INIT_MODES = ("xavier", "filters", "dwp")
EVAL_MODES_HELP = "'mean' or 'mc:S'"


# -- configuration ---------------------------------------------------------------------------

@dataclass
class DataConfig:
    """Either a synthetic glyph alphabet or a pair of IDX train/test files."""

    kind: str = "synthetic"
    alphabet: int = 2
    n_train: int = 5000
    n_test: int = 2000
    seed: int = 0
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass
class PriorConfig:
    """How the source kernels and kernel VAEs are obtained.

    With ``vaes``/``kernels`` paths (keyed by kernel size) the artifacts are
    loaded; otherwise they are built from the source data and cached.
    """

    source_models: int = 10
    source_width: float = 0.125
    source_epochs: int = 20
    source_l2: float = 1e-3
    prune_factor: float = 0.1
    # the 7x7 set is small (a few hundred kernels), so it gets more epochs
    vae_epochs: dict = field(default_factory=lambda: {"7": 300, "5": 30})
    vae_batch_size: int = 256
    vae_max_kernels: int = 8000
    vae_standardize: bool = True
    z_dims: dict = field(default_factory=lambda: {"7": 2, "5": 4})
    kernels: dict = field(default_factory=dict)
    vaes: dict = field(default_factory=dict)

    def vae_config(self, kernel_size: int, seed: int) -> VaeTrainConfig:
        key = str(kernel_size)
        return VaeTrainConfig(epochs=int(self.vae_epochs[key]), batch_size=self.vae_batch_size,
                              z_dim=int(self.z_dims[key]), standardize=self.vae_standardize, seed=seed)


@dataclass
class ExperimentConfig:
    experiment: str = "classification"
    source: DataConfig = field(default_factory=lambda: DataConfig(alphabet=1))
    target: DataConfig = field(default_factory=DataConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    train_sizes: list = field(default_factory=lambda: [100, 500, 1000, 5000])
    priors: list = field(default_factory=lambda: ["standard-normal", "log-uniform", "dwp"])
    inits: list = field(default_factory=lambda: list(INIT_MODES))
    init: str = "xavier"
    widths: list = field(default_factory=lambda: [0.125, 0.25, 0.5, 1.0])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    epochs: int = 30
    lr: float = 1e-3
    lr_decay: bool = True
    batch_size: int = 100
    eval_mode: str = "mean"
    kl_weight: float = 1.0
    eval_every: int = 10
    test_subset: int = 0
    vae_variant: bool = False
    gap_k: int = 1000
    gap_n_outer: int = 10
    workers: int = 1
    seed: int = 0
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self, *sections) -> str:
        d = self.to_dict()
        payload = {k: d[k] for k in sections} if sections else d
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _from_dict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in d.items():
        sub = {"source": DataConfig, "target": DataConfig, "prior": PriorConfig}.get(k) if cls is ExperimentConfig else None
        kwargs[k] = _from_dict(sub, v, f"{where}.{k}") if sub else v
    return cls(**kwargs)


def config_from_dict(d: dict) -> ExperimentConfig:
    cfg = _from_dict(ExperimentConfig, d, "config")
    validate_config(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc})") from None
    return config_from_dict(d)


def _validate_data(d: DataConfig, where: str) -> None:
    if d.kind == "synthetic":
        if d.n_train < 1 or d.n_test < 1:
            raise ConfigError(f"{where}: n_train and n_test must be positive")
    elif d.kind == "idx":
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            p = getattr(d, name)
            if not p or not resolve_path(p).exists():
                raise ConfigError(f"{where}.{name}: file not found: {p}")
    else:
        raise ConfigError(f"{where}.kind must be 'synthetic' or 'idx', got {d.kind!r}")


def validate_config(cfg: ExperimentConfig) -> None:
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {cfg.experiment!r}")
    _validate_data(cfg.source, "source")
    _validate_data(cfg.target, "target")
    if not cfg.seeds:
        raise ConfigError("seeds must be non-empty")
    if not all(isinstance(s, int) and s >= 0 for s in cfg.seeds):
        raise ConfigError("seeds must be non-negative integers")
    bad = [p for p in cfg.priors if p not in PRIOR_KINDS]
    if bad:
        raise ConfigError(f"unknown priors {bad}; expected a subset of {PRIOR_KINDS}")
    bad = [m for m in [*cfg.inits, cfg.init] if m not in INIT_MODES]
    if bad:
        raise ConfigError(f"unknown init modes {bad}; expected a subset of {INIT_MODES}")
    if not cfg.widths or any(not (0 < k <= 4) for k in cfg.widths):
        raise ConfigError("widths must be non-empty with 0 < k <= 4")
    if not cfg.train_sizes or any(n < 1 for n in cfg.train_sizes):
        raise ConfigError("train_sizes must be non-empty positive integers")
    if cfg.target.kind == "synthetic" and max(cfg.train_sizes) > cfg.target.n_train:
        raise ConfigError(f"train size {max(cfg.train_sizes)} exceeds target.n_train={cfg.target.n_train}")
    for name in ("epochs", "batch_size", "eval_every", "workers", "gap_k", "gap_n_outer"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1")
    if cfg.lr <= 0 or cfg.kl_weight < 0:
        raise ConfigError("lr must be positive and kl_weight non-negative")
    try:
        vi.parse_eval_mode(cfg.eval_mode)
    except ValueError:
        raise ConfigError(f"eval_mode must be {EVAL_MODES_HELP}, got {cfg.eval_mode!r}") from None
    p = cfg.prior
    if p.source_models < 1 or p.source_epochs < 0 or p.source_l2 < 0:
        raise ConfigError("prior: source_models >= 1, source_epochs >= 0, source_l2 >= 0")
    for group in ("vae_epochs", "z_dims"):
        for k in ("5", "7"):
            if k not in getattr(p, group) or int(getattr(p, group)[k]) < 1:
                raise ConfigError(f"prior.{group}: needs a positive entry for kernel size '{k}'")
    for group in ("kernels", "vaes"):
        for k, path in getattr(p, group).items():
            if k not in ("5", "7"):
                raise ConfigError(f"prior.{group}: keys must be kernel sizes '5' or '7', got {k!r}")
            if not Path(path).exists():
                raise ConfigError(f"prior.{group}.{k}: file not found: {path}")


# -- data and prior artifacts -------------------------------------------------------------------

def load_data(d: DataConfig) -> tuple[LabeledDataset, LabeledDataset]:
    if d.kind == "synthetic":
        train = synth_dataset(SynthSpec(n=d.n_train, alphabet=d.alphabet), d.seed)
        test = synth_dataset(SynthSpec(n=d.n_test, alphabet=d.alphabet), d.seed + 1_000_003)
        return train, test
    return load_idx(d.train_images, d.train_labels), load_idx(d.test_images, d.test_labels)


@dataclass
class PriorArtifacts:
    kernels: dict[int, KernelDataset]
    vaes: dict[int, VaeModel]

    def dwp(self) -> Dwp:
        return Dwp(dict(self.vaes))

    def gaussian_ml(self) -> GaussianML:
        return GaussianML({k: fit_gaussian_ml(ds.kernels) for k, ds in self.kernels.items()})


def train_source_models(cfg: ExperimentConfig, master_seed: int, source=None) -> list[Network]:
    p = cfg.prior
    train = source if source is not None else load_data(cfg.source)[0]
    cells = [(train, p.source_l2, p.source_epochs, _cell_seed(master_seed, "source", i), p.source_width)
             for i in range(p.source_models)]
    return run_cells(_source_cell, cells, cfg.workers)


def _source_cell(args):
    train, l2, epochs, seed, width = args
    return train_source_model(train, l2=l2, epochs=epochs, seed=seed, width=width)


def build_prior_artifacts(cfg: ExperimentConfig, master_seed: int, cache_dir=None) -> PriorArtifacts:
    """Load configured prior artifacts, or run source training, harvest, pruning and VAE fitting.

    Built artifacts are cached under ``cache_dir`` keyed by a fingerprint of
    the source data and prior settings.
    """
    p = cfg.prior
    if p.vaes and p.kernels:
        kernels = {int(k): load_kernels(v) for k, v in p.kernels.items()}
        vaes = {int(k): vae_from_checkpoint(load_checkpoint(v)) for k, v in p.vaes.items()}
        return PriorArtifacts(kernels, vaes)

    key = f"{cfg.fingerprint('source', 'prior')}-{master_seed}"
    cache = Path(cache_dir) / f"prior-{key}" if cache_dir is not None else None
    if cache is not None and (cache / "done").exists():
        kernels = {k: load_kernels(cache / f"kernels{k}x{k}.dwpk") for k in (7, 5)}
        vaes = {k: vae_from_checkpoint(load_checkpoint(cache / f"vae{k}x{k}.dwpc")) for k in (7, 5)}
        return PriorArtifacts(kernels, vaes)

    models = train_source_models(cfg, master_seed)
    kernels, vaes = {}, {}
    for layer, conv in enumerate(models[0].conv_layers()):
        k = conv.kernels.shape[-1]
        ds = prune_small_norm(harvest_kernels(models, layer), factor=p.prune_factor)
        ds.meta["seed"] = master_seed
        kernels[k] = ds
        data = ds.kernels
        if len(data) > p.vae_max_kernels:
            idx = stream(master_seed, "prior", "vae-subset", k).choice(len(data), p.vae_max_kernels, replace=False)
            data = data[np.sort(idx)]
        vaes[k] = train_vae(data, p.vae_config(k, _cell_seed(master_seed, "vae", k))).model
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        for i, m in enumerate(models):
            save_checkpoint(network_checkpoint(m, source_index=i), cache / f"source{i}.dwpc")
        for k in kernels:
            save_kernels(kernels[k], cache / f"kernels{k}x{k}.dwpk")
            save_checkpoint(vae_checkpoint(vaes[k]), cache / f"vae{k}x{k}.dwpc")
        (cache / "done").write_text(key)
    return PriorArtifacts(kernels, vaes)


def make_prior(kind: str, artifacts: PriorArtifacts | None):
    if kind == "standard-normal":
        return StandardNormal()
    if kind == "log-uniform":
        return LogUniform()
    if artifacts is None:
        raise ConfigError(f"prior {kind!r} needs source kernels")
    return artifacts.gaussian_ml() if kind == "gaussian-ml" else artifacts.dwp()


# -- initialization ---------------------------------------------------------------------------

def init_weights(model: Network, mode: str, rng: np.random.Generator, kernels: dict | None = None,
                 vaes: dict | None = None) -> Network:
    """Overwrite conv kernels (means, for Bayesian layers) according to ``mode``.

    ``xavier`` draws ``U(-a, a)`` with ``a = sqrt(6 / (fan_in + fan_out))``;
    ``filters`` draws kernels from a :class:`KernelDataset` without
    replacement (with replacement if it is too small); ``dwp`` samples the
    kernel VAE decoders.
    """
    for conv in model.conv_layers():
        w = conv.kernels
        o, i, kh, kw = w.shape
        n = o * i
        if mode == "xavier":
            new = xavier_uniform(w.shape, rng, w.dtype)
        elif mode == "filters":
            if not kernels or kh not in kernels:
                raise ConfigError(f"filters init needs a {kh}x{kw} kernel dataset")
            src = kernels[kh].kernels
            idx = rng.choice(len(src), n, replace=len(src) < n)
            new = src[idx].reshape(w.shape)
        elif mode == "dwp":
            if not vaes or kh not in vaes:
                raise ConfigError(f"dwp init needs a {kh}x{kw} kernel VAE")
            new = sample_kernels(vaes[kh], n, rng).reshape(w.shape)
        else:
            raise ConfigError(f"unknown init mode {mode!r}")
        w.data = np.asarray(new, dtype=w.dtype).copy()
    return model


# -- worker pool -------------------------------------------------------------------------------

def _cell_seed(master: int, *labels) -> int:
    return int(stream(master, "cell", *labels).integers(2**31 - 1))


def run_cells(fn, cells: list, workers: int = 1) -> list:
    """Map ``fn`` over ``cells`` in a bounded process pool, preserving grid order."""
    if workers <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cells))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    text = buf.getvalue()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return text


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _out_dir(cfg: ExperimentConfig, out) -> Path:
    return Path(out if out is not None else cfg.out_dir)


def _test_set(cfg, test: LabeledDataset) -> LabeledDataset:
    return test.subset(np.arange(min(cfg.test_subset, len(test)))) if cfg.test_subset else test


def plan(cfg: ExperimentConfig) -> list[dict]:
    """The grid a driver would run, without doing any work."""
    if cfg.experiment == "classification":
        return [{"train_size": n, "prior": p, "seed": s} for n in cfg.train_sizes for p in cfg.priors for s in cfg.seeds]
    if cfg.experiment == "features":
        return [{"k": k, "init": m, "seed": s} for k in cfg.widths for m in cfg.inits for s in cfg.seeds]
    if cfg.experiment == "convergence":
        variants = ["classifier"] + (["vae"] if cfg.vae_variant else [])
        return [{"variant": v, "init": m, "seed": s} for v in variants for m in cfg.inits for s in cfg.seeds]
    return [{"train_size": cfg.train_sizes[0], "k": cfg.widths[0], "seed": cfg.seeds[0], "K": cfg.gap_k}]


# -- classification ------------------------------------------------------------------------------

def _vi_config(cfg: ExperimentConfig, seed: int, epochs: int | None = None) -> vi.ViConfig:
    return vi.ViConfig(epochs=epochs or cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, lr_decay=cfg.lr_decay,
                       seed=seed, kl_weight=cfg.kl_weight, eval_mode=cfg.eval_mode, eval_every=cfg.epochs)


def classification_cell(args) -> tuple[float, vi.ViResult]:
    cfg, train, test, artifacts, n, prior_kind, seed, master = args
    cell = _cell_seed(master, "classification", n, seed)
    sub = train.balanced_subset(n, stream(cell, "subset"))
    model = build_network(mnist_spec(cfg.widths[0], classes=train.classes, input_shape=train.images.shape[1:]),
                          "bayesian", rng=stream(cell, "init"))
    init_weights(model, cfg.init, stream(cell, "init", cfg.init),
                 kernels=artifacts.kernels if artifacts else None, vaes=artifacts.vaes if artifacts else None)
    prior = make_prior(prior_kind, artifacts)
    result = vi.train_vi(sub, model, prior, _vi_config(cfg, cell), test=test)
    acc = vi.accuracy(model, test, cfg.eval_mode, stream(cell, "predict"))
    return acc, result


def run_classification(cfg: ExperimentConfig, out=None, master_seed: int | None = None, artifacts=None,
                       data=None) -> Path:
    """Variational inference per (train size, prior, seed); CSV ``train_size,prior,seed,test_acc``."""
    master = cfg.seed if master_seed is None else master_seed
    out = _out_dir(cfg, out)
    train, test = data or load_data(cfg.target)
    test = _test_set(cfg, test)
    needs = any(p in ("gaussian-ml", "dwp") for p in cfg.priors) or cfg.init != "xavier"
    if artifacts is None and needs:
        artifacts = build_prior_artifacts(cfg, master, out / "cache")
    grid = plan(cfg)
    cells = [(cfg, train, test, artifacts, g["train_size"], g["prior"], g["seed"], master) for g in grid]
    results = run_cells(_classification_acc, cells, cfg.workers)
    rows = [[g["train_size"], g["prior"], g["seed"], acc] for g, acc in zip(grid, results)]
    path = out / "classification.csv"
    _write_csv(path, ["train_size", "prior", "seed", "test_acc"], rows)
    return path


def _classification_acc(args) -> float:
    return classification_cell(args)[0]


# -- random features -------------------------------------------------------------------------------

def conv_features(model: Network, x: np.ndarray, batch: int = 500) -> np.ndarray:
    """Output of the frozen conv trunk (everything before the linear head)."""
    trunk = [l for l in model.layers if not isinstance(l, Linear)]
    out = []
    with no_grad():
        for start in range(0, len(x), batch):
            h = Tensor(x[start:start + batch])
            for layer in trunk:
                h = layer(h)
            out.append(h.data)
    return np.concatenate(out)


def train_head(features: np.ndarray, labels: np.ndarray, classes: int, cfg: ExperimentConfig, seed: int) -> Linear:
    """Fit only the linear classifier on fixed features with Adam."""
    head = Linear(features.shape[1], classes, rng=stream(seed, "head", "init"))
    n = len(labels)
    steps = int(np.ceil(n / cfg.batch_size))
    opt = Adam(head.trainable_parameters(), lr=cfg.lr, decay_horizon=steps * cfg.epochs if cfg.lr_decay else None)
    order = stream(seed, "train", "order")
    for _ in range(cfg.epochs):
        for idx in vi.minibatches(n, cfg.batch_size, order):
            opt.zero_grad()
            F.cross_entropy(head(Tensor(features[idx])), labels[idx]).backward()
            opt.step()
    return head


def features_cell(args) -> float:
    cfg, train, test, artifacts, k, mode, seed, master = args
    cell = _cell_seed(master, "features", k, seed)
    model = build_network(mnist_spec(k, classes=train.classes, input_shape=train.images.shape[1:]),
                          "deterministic", rng=stream(cell, "init"))
    init_weights(model, mode, stream(cell, "init", mode),
                 kernels=artifacts.kernels if artifacts else None, vaes=artifacts.vaes if artifacts else None)
    model.requires_grad_(False)
    f_train = conv_features(model, train.images)
    f_test = conv_features(model, test.images)
    head = train_head(f_train, train.labels, train.classes, cfg, cell)
    with no_grad():
        pred = head(Tensor(f_test)).data.argmax(axis=1)
    return float((pred == test.labels).mean())


def run_random_features(cfg: ExperimentConfig, out=None, master_seed: int | None = None, artifacts=None,
                        data=None) -> Path:
    """Frozen random conv features with a trained linear head; CSV ``k,init,seed,test_acc``."""
    master = cfg.seed if master_seed is None else master_seed
    out = _out_dir(cfg, out)
    train, test = data or load_data(cfg.target)
    train = train.balanced_subset(cfg.train_sizes[0], stream(master, "features", "subset"))
    test = _test_set(cfg, test)
    if artifacts is None and any(m != "xavier" for m in cfg.inits):
        artifacts = build_prior_artifacts(cfg, master, out / "cache")
    grid = plan(cfg)
    cells = [(cfg, train, test, artifacts, g["k"], g["init"], g["seed"], master) for g in grid]
    accs = run_cells(features_cell, cells, cfg.workers)
    rows = [[g["k"], g["init"], g["seed"], a] for g, a in zip(grid, accs)]
    path = out / "features.csv"
    _write_csv(path, ["k", "init", "seed", "test_acc"], rows)
    return path


# -- convergence ------------------------------------------------------------------------------------

class ImageVae(Module):
    """VAE on images: the classifier's conv trunk as encoder, an MLP Bernoulli decoder."""

    def __init__(self, trunk: Network, feat_dim: int, z_dim: int, pixels: int, rng, hidden: int = 256):
        self.trunk = trunk
        self.z_dim = z_dim
        self.enc = Linear(feat_dim, 2 * z_dim, rng=rng)
        self.dec_hidden = Linear(z_dim, hidden, rng=rng)
        self.dec_out = Linear(hidden, pixels, rng=rng)

    def elbo(self, x: np.ndarray, rng) -> Tensor:
        h = Tensor(x)
        for layer in self.trunk.layers:
            if isinstance(layer, Linear):
                break
            h = layer(h)
        stats = self.enc(h)
        mu, logvar = stats[:, :self.z_dim], F.clamp(stats[:, self.z_dim:], -7.0, 7.0)
        z = mu + F.exp(0.5 * logvar) * rng.standard_normal(mu.shape).astype(mu.dtype)
        logits = self.dec_out(F.leaky_relu(self.dec_hidden(z)))
        target = Tensor(x.reshape(len(x), -1))
        # Bernoulli log-likelihood with continuous targets in [0, 1]
        recon = (target * logits - F.softplus(logits)).sum(axis=1)
        kl = (0.5 * (F.exp(logvar) + F.square(mu) - 1.0 - logvar)).sum(axis=1)
        return (recon - kl).mean()


def convergence_cell(args) -> list[list]:
    cfg, train, test, artifacts, variant, mode, seed, master = args
    cell = _cell_seed(master, "convergence", variant, seed)
    spec = mnist_spec(cfg.widths[0], classes=train.classes, input_shape=train.images.shape[1:])
    model = build_network(spec, "deterministic", rng=stream(cell, "init"))
    init_weights(model, mode, stream(cell, "init", mode),
                 kernels=artifacts.kernels if artifacts else None, vaes=artifacts.vaes if artifacts else None)
    rows = []
    tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, lr_decay=cfg.lr_decay, seed=cell)
    if variant == "classifier":
        from .kernels import evaluate_accuracy

        def record(step, m):
            if step % cfg.eval_every == 0:
                rows.append([step, mode, seed, evaluate_accuracy(m, test)])

        rows.append([0, mode, seed, evaluate_accuracy(model, test)])
        train_deterministic(train, model, tcfg, callback=record)
        return rows
    return _train_image_vae(cfg, model, train, test, mode, seed, cell)


def _train_image_vae(cfg, model, train, test, mode, seed, cell) -> list[list]:
    feat_dim = model.layers[-1].weight.shape[1]
    vae = ImageVae(model, feat_dim, 16, int(np.prod(train.images.shape[1:])), stream(cell, "vae", "init"))
    n = len(train)
    steps = int(np.ceil(n / cfg.batch_size))
    params = [p for name, p in vae.named_parameters() if not name.startswith("trunk.layers." + str(len(model.layers) - 1))]
    opt = Adam(params, lr=cfg.lr, decay_horizon=steps * cfg.epochs if cfg.lr_decay else None)
    order, noise = stream(cell, "train", "order"), stream(cell, "vae", "noise")

    def test_elbo():
        with no_grad():
            return float(vae.elbo(test.images, stream(cell, "vae", "eval")).data)

    rows = [[0, mode, seed, test_elbo()]]
    step = 0
    for _ in range(cfg.epochs):
        for idx in vi.minibatches(n, cfg.batch_size, order):
            opt.zero_grad()
            (-vae.elbo(train.images[idx], noise)).backward()
            opt.step()
            step += 1
            if step % cfg.eval_every == 0:
                rows.append([step, mode, seed, test_elbo()])
    return rows


def run_convergence(cfg: ExperimentConfig, out=None, master_seed: int | None = None, artifacts=None,
                    data=None) -> list[Path]:
    """Full training from each init mode; CSVs ``step,init,seed,metric`` (accuracy, or ELBO for the VAE)."""
    master = cfg.seed if master_seed is None else master_seed
    out = _out_dir(cfg, out)
    train, test = data or load_data(cfg.target)
    train = train.balanced_subset(cfg.train_sizes[0], stream(master, "convergence", "subset"))
    test = _test_set(cfg, test)
    if artifacts is None and any(m != "xavier" for m in cfg.inits):
        artifacts = build_prior_artifacts(cfg, master, out / "cache")
    grid = plan(cfg)
    cells = [(cfg, train, test, artifacts, g["variant"], g["init"], g["seed"], master) for g in grid]
    results = run_cells(convergence_cell, cells, cfg.workers)
    paths = []
    for variant, name in (("classifier", "convergence.csv"), ("vae", "convergence_vae.csv")):
        rows = [r for g, res in zip(grid, results) if g["variant"] == variant for r in res]
        if rows:
            paths.append(out / name)
            _write_csv(out / name, ["step", "init", "seed", "metric"], rows)
    return paths


def steps_to_threshold(rows: list[tuple[int, float]], threshold: float) -> int | None:
    """First step whose metric reaches ``threshold``; ``None`` if never."""
    for step, metric in sorted(rows):
        if metric >= threshold:
            return step
    return None


# -- gap ---------------------------------------------------------------------------------------

def run_gap(cfg: ExperimentConfig, out=None, master_seed: int | None = None, artifacts=None, data=None) -> Path:
    """Train one dwp model and compare the auxiliary and importance-weighted bounds; writes ``gap.json``."""
    master = cfg.seed if master_seed is None else master_seed
    out = _out_dir(cfg, out)
    train, test = data or load_data(cfg.target)
    if artifacts is None:
        artifacts = build_prior_artifacts(cfg, master, out / "cache")
    seed, n = cfg.seeds[0], cfg.train_sizes[0]
    cell = _cell_seed(master, "gap", n, seed)
    sub = train.balanced_subset(n, stream(cell, "subset"))
    model = build_network(mnist_spec(cfg.widths[0], classes=train.classes, input_shape=train.images.shape[1:]),
                          "bayesian", rng=stream(cell, "init"))
    init_weights(model, cfg.init, stream(cell, "init", cfg.init), kernels=artifacts.kernels, vaes=artifacts.vaes)
    prior = artifacts.dwp()
    res = vi.train_vi(sub, model, prior, _vi_config(cfg, cell))
    report = vi.gap_report(model, prior, res.reverse_models, k=cfg.gap_k, data=sub, n_outer=cfg.gap_n_outer, seed=cell)
    doc = {"train_size": n, "k_width": cfg.widths[0], "seed": seed, **report.to_dict()}
    path = out / "gap.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# -- exports ------------------------------------------------------------------------------------

def export_prior_samples(vae: VaeModel, n: int, path, seed: int = 0) -> Path:
    """Write ``n`` prior kernel samples (and their decoder means) as kernel dataset files."""
    w, mu = sample_kernels(vae, n, stream(seed, "export", "samples"), return_means=True)
    path = Path(path)
    meta = {"kind": "prior-samples", "kernel_size": vae.kernel_size, "z_dim": vae.z_dim, "seed": seed}
    if n:
        save_kernels(KernelDataset(w, meta), path)
        save_kernels(KernelDataset(mu, dict(meta, kind="prior-sample-means")),
                     path.with_name(path.stem + "_means" + path.suffix))
    return path


def export_embeddings(vae: VaeModel, kernels: np.ndarray, path) -> Path:
    """Latent posterior means per kernel as CSV ``idx,z0,z1,...``."""
    z = embed_kernels(vae, kernels)
    rows = [[i, *map(float, row)] for i, row in enumerate(z)]
    _write_csv(Path(path), ["idx"] + [f"z{j}" for j in range(vae.z_dim)], rows)
    return Path(path)
