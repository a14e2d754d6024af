"""Kernel VAEs whose decoders define the deep weight prior.

One VAE is trained per kernel spatial size on a dataset of harvested
convolution kernels. The decoder ``p(w | z)`` and the standard-normal
latent prior together define an implicit prior over kernels; the encoder
is reused as the initial reverse model during variational inference.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Conv2d, ConvTranspose2d, Module, Tensor, no_grad
from .autodiff import functional as F
from .errors import DivergenceError

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -7.0, 7.0
DEFAULT_Z_DIM = {7: 2, 5: 4}


def as_kernel_batch(w) -> Tensor:
    w = w if isinstance(w, Tensor) else Tensor(w)
    if w.ndim == 3:
        w = w.reshape(w.shape[0], 1, w.shape[1], w.shape[2])
    return w


class _Heads(Module):
    def __init__(self, in_ch, out_ch, rng, dtype):
        self.fc_mu = Conv2d(in_ch, out_ch, 1, rng=rng, dtype=dtype)
        self.fc_var = Conv2d(in_ch, out_ch, 1, rng=rng, dtype=dtype)

    def forward(self, h):
        return self.fc_mu(h), F.clamp(self.fc_var(h), LOGVAR_MIN, LOGVAR_MAX)


class Encoder7x7(Module):
    """Three unpadded 3x3 convs take a 7x7 kernel down to 1x1."""

    def __init__(self, z_dim: int, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.z_dim = z_dim
        self.features = [
            Conv2d(1, 32, 3, rng=rng, dtype=dtype),
            Conv2d(32, 64, 3, rng=rng, dtype=dtype),
            Conv2d(64, 64, 3, rng=rng, dtype=dtype),
        ]
        self.heads = _Heads(64, z_dim, rng, dtype)

    def forward(self, w):
        h = as_kernel_batch(w)
        for layer in self.features:
            h = F.elu(layer(h))
        mu, logvar = self.heads(h)
        return mu.reshape(mu.shape[0], -1), logvar.reshape(logvar.shape[0], -1)


class Decoder7x7(Module):
    def __init__(self, z_dim: int, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.z_dim = z_dim
        self.features = [
            ConvTranspose2d(z_dim, 64, 3, rng=rng, dtype=dtype),
            ConvTranspose2d(64, 64, 3, rng=rng, dtype=dtype),
            ConvTranspose2d(64, 32, 3, rng=rng, dtype=dtype),
        ]
        self.heads = _Heads(32, 1, rng, dtype)

    def forward(self, z):
        h = z.reshape(z.shape[0], z.shape[1], 1, 1)
        for layer in self.features:
            h = F.elu(layer(h))
        mu, logvar = self.heads(h)
        n, _, kh, kw = mu.shape
        return mu.reshape(n, kh, kw), logvar.reshape(n, kh, kw)


class Encoder5x5(Module):
    """Two padded 3x3 convs keep 5x5, two unpadded ones reduce to 1x1."""

    def __init__(self, z_dim: int, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.z_dim = z_dim
        self.features = [
            Conv2d(1, 64, 3, padding=1, rng=rng, dtype=dtype),
            Conv2d(64, 64, 3, padding=1, rng=rng, dtype=dtype),
            Conv2d(64, 128, 3, rng=rng, dtype=dtype),
            Conv2d(128, 128, 3, rng=rng, dtype=dtype),
        ]
        self.heads = _Heads(128, z_dim, rng, dtype)

    def forward(self, w):
        h = as_kernel_batch(w)
        for layer in self.features:
            h = F.elu(layer(h))
        mu, logvar = self.heads(h)
        return mu.reshape(mu.shape[0], -1), logvar.reshape(logvar.shape[0], -1)


class Decoder5x5(Module):
    def __init__(self, z_dim: int, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.z_dim = z_dim
        self.features = [
            Conv2d(z_dim, 128, 1, rng=rng, dtype=dtype),
            ConvTranspose2d(128, 128, 3, rng=rng, dtype=dtype),
            ConvTranspose2d(128, 128, 3, rng=rng, dtype=dtype),
            Conv2d(128, 64, 1, rng=rng, dtype=dtype),
        ]
        self.heads = _Heads(64, 1, rng, dtype)

    def forward(self, z):
        h = z.reshape(z.shape[0], z.shape[1], 1, 1)
        for layer in self.features:
            h = F.elu(layer(h))
        mu, logvar = self.heads(h)
        n, _, kh, kw = mu.shape
        return mu.reshape(n, kh, kw), logvar.reshape(n, kh, kw)


_ARCHS = {7: (Encoder7x7, Decoder7x7), 5: (Encoder5x5, Decoder5x5)}


class VaeModel(Module):
    """Encoder/decoder pair over ``kernel_size x kernel_size`` kernels.

    ``shift`` and ``scale`` implement the optional dataset standardization:
    the networks see ``(w - shift) / scale`` and all densities are reported
    in raw kernel units.
    """

    def __init__(self, kernel_size: int, z_dim: int | None = None, rng=None, dtype=np.float32):
        if kernel_size not in _ARCHS:
            raise ValueError(f"unsupported kernel size {kernel_size}; expected one of {sorted(_ARCHS)}")
        z_dim = z_dim or DEFAULT_Z_DIM[kernel_size]
        rng = rng or np.random.default_rng(0)
        enc_cls, dec_cls = _ARCHS[kernel_size]
        self.kernel_size = kernel_size
        self.z_dim = z_dim
        self.encoder = enc_cls(z_dim, rng=rng, dtype=dtype)
        self.decoder = dec_cls(z_dim, rng=rng, dtype=dtype)
        self.shift = 0.0
        self.scale = 1.0
        self.frozen = False

    def encode(self, w):
        w = as_kernel_batch(w)
        if self.shift != 0.0 or self.scale != 1.0:
            w = (w - self.shift) * (1.0 / self.scale)
        return self.encoder(w)

    def decode(self, z):
        z = z if isinstance(z, Tensor) else Tensor(z)
        mu, logvar = self.decoder(z)
        if self.shift != 0.0 or self.scale != 1.0:
            mu = mu * self.scale + self.shift
            logvar = logvar + 2.0 * float(np.log(self.scale))
        return mu, logvar

    def freeze(self) -> "VaeModel":
        """Fix the decoder; gradients still flow through it to its inputs."""
        self.decoder.requires_grad_(False)
        self.frozen = True
        return self


def build_vae(kernel_size: int, z_dim: int | None = None, rng=None, dtype=np.float32) -> VaeModel:
    return VaeModel(kernel_size, z_dim=z_dim, rng=rng, dtype=dtype)


@dataclass(frozen=True)
class LatentPrior:
    """Factorized standard normal over ``z_dim`` latent coordinates."""

    z_dim: int

    def sample(self, n: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
        return rng.standard_normal((n, self.z_dim)).astype(dtype)

    def log_prob(self, z: Tensor) -> Tensor:
        return F.gaussian_log_prob(z, 0.0, 0.0).sum(axis=-1)


def kl_to_standard_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """Row-wise ``KL(N(mu, exp(logvar)) || N(0, I))``."""
    return (0.5 * (F.exp(logvar) + F.square(mu) - 1.0 - logvar)).sum(axis=-1)


def reparam_sample(mu: Tensor, logvar: Tensor, rng: np.random.Generator) -> Tensor:
    eps = rng.standard_normal(mu.shape).astype(mu.dtype)
    return mu + F.exp(0.5 * logvar) * eps


def vae_elbo(w, encode, decode, rng: np.random.Generator):
    """Batch-mean ELBO for kernels ``w (N, H, W)``.

    ``encode`` maps kernels to ``(mu, logvar)`` over z; ``decode`` maps z
    to per-pixel ``(mu, logvar)``. One reparametrized latent sample per
    kernel; the latent KL is closed form. Returns the scalar ELBO tensor
    and a dict of the batch-mean reconstruction and KL terms.
    """
    w = w if isinstance(w, Tensor) else Tensor(w)
    if w.shape[0] == 0:
        raise ValueError("vae_elbo: empty batch")
    mu_z, lv_z = encode(w)
    z = reparam_sample(mu_z, lv_z, rng)
    mu_w, lv_w = decode(z)
    target = w.reshape(mu_w.shape)
    recon = F.gaussian_log_prob(target, mu_w, lv_w).reshape(w.shape[0], -1).sum(axis=1)
    kl = kl_to_standard_normal(mu_z, lv_z)
    elbo = (recon - kl).mean()
    return elbo, {"recon": float(recon.data.mean()), "kl": float(kl.data.mean())}


@dataclass
class VaeTrainConfig:
    epochs: int = 300
    batch_size: int = 256
    lr: float = 1e-3
    lr_decay: bool = True
    val_fraction: float = 0.1
    seed: int = 0
    z_dim: int | None = None
    standardize: bool = False


@dataclass
class VaeTrainResult:
    model: VaeModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1


def train_vae(kernels: np.ndarray, config: VaeTrainConfig, model: VaeModel | None = None) -> VaeTrainResult:
    """Fit a kernel VAE with Adam, keeping the best-validation-ELBO weights."""
    from .rng import stream

    kernels = np.asarray(kernels, dtype=np.float32)
    n, kh, kw = kernels.shape
    if kh != kw:
        raise ValueError(f"train_vae: kernels must be square, got {kh}x{kw}")
    split_rng = stream(config.seed, "vae", "split")
    perm = split_rng.permutation(n)
    n_val = int(round(config.val_fraction * n)) if n >= 10 else 0
    val, train = kernels[perm[:n_val]], kernels[perm[n_val:]]
    if len(train) < min(config.batch_size, len(train)) or len(train) == 0:
        raise ValueError("train_vae: empty training split")
    batch = min(config.batch_size, len(train))

    if model is None:
        model = build_vae(kh, z_dim=config.z_dim, rng=stream(config.seed, "vae", "init"))
    if config.standardize:
        model.shift = float(train.mean())
        model.scale = float(train.std()) or 1.0
    steps_per_epoch = int(np.ceil(len(train) / batch))
    horizon = steps_per_epoch * config.epochs if config.lr_decay else None
    opt = Adam(model.trainable_parameters(), lr=config.lr, decay_horizon=horizon)
    noise = stream(config.seed, "vae", "noise")
    order = stream(config.seed, "vae", "order")

    result = VaeTrainResult(model=model)
    best_val = -np.inf
    best_state = model.state_dict()
    for epoch in range(config.epochs):
        idx = order.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), batch):
            xb = train[idx[start:start + batch]]
            opt.zero_grad()
            elbo, terms = vae_elbo(xb, model.encode, model.decode, noise)
            if not np.isfinite(elbo.data):
                raise DivergenceError(f"train_vae epoch {epoch}", terms)
            (-elbo).backward()
            opt.step()
            total += float(elbo.data) * len(xb)
        train_elbo = total / len(train)
        val_elbo = evaluate_elbo(model, val, seed=config.seed) if n_val else train_elbo
        result.history.append({"epoch": epoch, "train_elbo": train_elbo, "val_elbo": val_elbo, "lr": opt.lr})
        log.debug("vae epoch %d train %.4f val %.4f", epoch, train_elbo, val_elbo)
        if val_elbo > best_val:
            best_val = val_elbo
            best_state = model.state_dict()
            result.best_epoch = epoch
    model.load_state_dict(best_state)
    return result


def evaluate_elbo(model: VaeModel, kernels: np.ndarray, seed: int = 0, batch: int = 1024) -> float:
    from .rng import stream

    rng = stream(seed, "vae", "eval")
    total = 0.0
    with no_grad():
        for start in range(0, len(kernels), batch):
            xb = kernels[start:start + batch]
            elbo, _ = vae_elbo(xb, model.encode, model.decode, rng)
            total += float(elbo.data) * len(xb)
    return total / max(1, len(kernels))


def sample_kernels(model: VaeModel, n: int, rng: np.random.Generator, return_means: bool = False):
    """Draw ``n`` kernels from the implicit prior: ``z ~ N(0, I)``, ``w ~ p(w | z)``."""
    k = model.kernel_size
    if n == 0:
        empty = np.zeros((0, k, k), dtype=np.float32)
        return (empty, empty.copy()) if return_means else empty
    z = LatentPrior(model.z_dim).sample(n, rng)
    with no_grad():
        mu, logvar = model.decode(Tensor(z))
    eps = rng.standard_normal(mu.shape).astype(mu.dtype)
    w = mu.data + np.exp(0.5 * logvar.data) * eps
    return (w, mu.data) if return_means else w


def embed_kernels(model: VaeModel, kernels: np.ndarray, batch: int = 1024) -> np.ndarray:
    """Posterior means of the latent code for each kernel, shape ``(N, z_dim)``."""
    out = []
    with no_grad():
        for start in range(0, len(kernels), batch):
            mu, _ = model.encode(np.asarray(kernels[start:start + batch], dtype=np.float32))
            out.append(mu.data)
    if not out:
        return np.zeros((0, model.z_dim), dtype=np.float32)
    return np.concatenate(out)


def frozen_copy(model: VaeModel) -> VaeModel:
    return copy.deepcopy(model).freeze()
