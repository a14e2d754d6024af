"""Stochastic variational inference under explicit and implicit kernel priors.

For the deep weight prior the intractable ``KL(q(w) || p(w))`` is replaced
by the auxiliary upper bound

    -H(q) + E_q[ KL(r(z|w) || p(z)) - E_r log p(w|z) ]

per kernel, where ``r(z|w)`` is a trainable reverse model shared across a
layer's kernels. Entropy and the latent KL are computed in closed form; the
reconstruction term uses one reparametrized sample of ``w`` and ``z``.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Module, Tensor, no_grad
from .autodiff import functional as F
from .errors import DivergenceError
from .layers import Network, entropy_q
from .priors import Dwp, explicit_kl
from .rng import stream
from .vae import VaeModel, as_kernel_batch, kl_to_standard_normal, reparam_sample

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -7.0, 7.0


# -- reverse models --------------------------------------------------------------------

class ReverseModel(Module):
    """``r(z | w; psi)``: an encoder-shaped network over single kernels."""

    def __init__(self, encoder: Module, shift: float = 0.0, scale: float = 1.0):
        self.encoder = encoder
        self.shift = shift
        self.scale = scale

    def forward(self, w):
        w = as_kernel_batch(w)
        if self.shift != 0.0 or self.scale != 1.0:
            w = (w - self.shift) * (1.0 / self.scale)
        mu, logvar = self.encoder(w)
        return mu, F.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)


class PriorReverse(Module):
    """The reverse model fixed to the latent prior, ``r(z | w) = N(0, I)``."""

    def __init__(self, z_dim: int):
        self.z_dim = z_dim

    def forward(self, w):
        n = w.shape[0]
        zeros = Tensor(np.zeros((n, self.z_dim), dtype=w.dtype))
        return zeros, Tensor(np.zeros((n, self.z_dim), dtype=w.dtype))


def make_reverse_models(network: Network, prior: Dwp) -> list[ReverseModel]:
    """One trainable reverse model per Bayesian conv layer, initialized from the VAE encoder."""
    models = []
    for layer in network.bayes_layers():
        vae = prior.vae_for(layer.theta.shape[-1])
        enc = copy.deepcopy(vae.encoder).requires_grad_(True)
        enc.to(layer.theta.dtype)
        models.append(ReverseModel(enc, vae.shift, vae.scale))
    return models


def prior_reverse_models(network: Network, prior: Dwp) -> list[PriorReverse]:
    return [PriorReverse(prior.vae_for(l.theta.shape[-1]).z_dim) for l in network.bayes_layers()]


# -- per-layer bound ----------------------------------------------------------------------

def layer_bound_terms(theta: Tensor, log_var: Tensor, vae: VaeModel, reverse: Module,
                      rng: np.random.Generator, n_samples: int = 1):
    """Sampled pieces of the auxiliary KL bound for one layer.

    Draws ``n_samples`` reparametrized weight tensors from ``q`` and one
    latent per kernel from ``r``. Returns ``(kl_r, recon)``, each of shape
    ``(n_samples,)`` and summed over the layer's kernels: the closed-form
    ``KL(r(z|w) || N(0, I))`` and the single-sample ``log p(w | z)``.
    """
    kh, kw = theta.shape[-2:]
    s = n_samples
    eps = rng.standard_normal((s,) + theta.shape).astype(theta.dtype)
    w = theta.reshape((1,) + theta.shape) + F.exp(0.5 * log_var).reshape((1,) + theta.shape) * eps
    kernels = w.reshape(-1, kh, kw)
    mu_r, lv_r = reverse(kernels)
    z = reparam_sample(mu_r, lv_r, rng)
    mu_w, lv_w = vae.decode(z)
    recon = F.gaussian_log_prob(kernels, mu_w, lv_w).reshape(s, -1).sum(axis=1)
    kl_r = kl_to_standard_normal(mu_r, lv_r).reshape(s, -1).sum(axis=1)
    return kl_r, recon


@dataclass
class AuxElboEstimate:
    """One stochastic evaluation of the (auxiliary) variational lower bound.

    ``total`` is the differentiable estimate; the remaining fields are
    plain floats per Bayesian layer. For explicit priors ``kl_bound``
    holds the closed-form KL and the entropy/latent fields stay empty.
    """

    total: Tensor
    data_term: float
    kl_bound: list[float]
    entropy: list[float] = field(default_factory=list)
    kl_latent: list[float] = field(default_factory=list)
    recon: list[float] = field(default_factory=list)

    @property
    def value(self) -> float:
        return float(self.total.data)

    @property
    def kl_bound_total(self) -> float:
        return float(np.sum(self.kl_bound))


def data_term(model: Network, x, y, rng, n_total: int, sample: str = "local"):
    """Minibatch-rescaled expected log-likelihood ``(N / |M|) sum log p(y | x, W)``."""
    logits = model(x, rng=rng, sample=sample)
    ll = -F.cross_entropy(logits, y, reduction="sum")
    return ll * (n_total / len(y)), logits


def aux_elbo_step(x, y, model: Network, prior: Dwp, reverse_models: list, rng: np.random.Generator,
                  n_total: int, n_weight_samples: int = 1) -> AuxElboEstimate:
    """Evaluate the auxiliary bound on a minibatch; differentiate ``total`` for gradients."""
    l_data, logits = data_term(model, x, y, rng, n_total)
    total = l_data
    est = AuxElboEstimate(total=total, data_term=float(l_data.data), kl_bound=[])
    for layer, rev in zip(model.bayes_layers(), reverse_models):
        vae = prior.vae_for(layer.theta.shape[-1])
        h = entropy_q(layer.log_var)
        kl_r, recon = layer_bound_terms(layer.theta, layer.log_var, vae, rev, rng, n_weight_samples)
        kl_r, recon = kl_r.mean(), recon.mean()
        bound = kl_r - recon - h
        total = total - bound
        est.entropy.append(float(h.data))
        est.kl_latent.append(float(kl_r.data))
        est.recon.append(float(recon.data))
        est.kl_bound.append(float(bound.data))
    est.total = total
    est.logits = logits
    _check_finite(est)
    return est


def explicit_elbo_step(x, y, model: Network, prior, rng: np.random.Generator, n_total: int,
                       kl_weight: float = 1.0) -> AuxElboEstimate:
    """``L_M - kl_weight * KL(q || p)`` for priors with closed-form KL."""
    l_data, logits = data_term(model, x, y, rng, n_total)
    total = l_data
    kls = []
    for layer in model.bayes_layers():
        kl = explicit_kl(prior, layer)
        kls.append(float(kl.data))
        if kl_weight:
            total = total - kl_weight * kl
    est = AuxElboEstimate(total=total, data_term=float(l_data.data), kl_bound=kls)
    est.logits = logits
    _check_finite(est)
    return est


def elbo_step(x, y, model, prior, reverse_models, rng, n_total, kl_weight=1.0, n_weight_samples=1):
    if isinstance(prior, Dwp):
        return aux_elbo_step(x, y, model, prior, reverse_models, rng, n_total, n_weight_samples)
    return explicit_elbo_step(x, y, model, prior, rng, n_total, kl_weight)


def _check_finite(est: AuxElboEstimate) -> None:
    if not np.isfinite(est.total.data):
        raise DivergenceError("elbo", {
            "data_term": est.data_term, "kl_bound": est.kl_bound, "entropy": est.entropy,
            "kl_latent": est.kl_latent, "recon": est.recon,
        })


# -- training -------------------------------------------------------------------------------

@dataclass
class ViConfig:
    epochs: int = 50
    batch_size: int = 100
    lr: float = 1e-3
    lr_decay: bool = True
    seed: int = 0
    kl_weight: float = 1.0
    n_weight_samples: int = 1
    eval_mode: str = "mean"
    eval_every: int = 1
    train_theta: bool = True
    train_reverse: bool = True


@dataclass
class ViResult:
    model: Network
    reverse_models: list
    trace: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


TRACE_COLUMNS = ("step", "epoch", "aux_elbo", "data_term", "kl_bound_term", "train_acc", "test_acc", "lr")


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_vi(train, model: Network, prior, config: ViConfig, test=None, reverse_models=None) -> ViResult:
    """Maximize the (auxiliary) ELBO over ``theta`` (and ``psi`` for dwp) with Adam.

    ``train``/``test`` expose ``images`` and ``labels`` arrays. Returns the
    trained model, reverse models and a per-epoch metrics trace.
    """
    x_all, y_all = train.images, train.labels
    n = len(y_all)
    if isinstance(prior, Dwp) and reverse_models is None:
        reverse_models = make_reverse_models(model, prior)
    reverse_models = reverse_models or []

    params = []
    if config.train_theta:
        params += model.trainable_parameters()
    if config.train_reverse:
        for r in reverse_models:
            params += r.trainable_parameters()
    steps_per_epoch = int(np.ceil(n / config.batch_size))
    horizon = steps_per_epoch * config.epochs if config.lr_decay else None
    opt = Adam(params, lr=config.lr, decay_horizon=horizon)
    order_rng = stream(config.seed, "train", "order")
    noise = stream(config.seed, "vi", "noise")
    eval_rng_seed = stream(config.seed, "vi", "eval").integers(2**31)

    result = ViResult(model=model, reverse_models=reverse_models)
    step = 0
    for epoch in range(config.epochs):
        sums = {"aux_elbo": 0.0, "data_term": 0.0, "kl_bound_term": 0.0}
        correct = 0
        for idx in minibatches(n, config.batch_size, order_rng):
            xb, yb = x_all[idx], y_all[idx]
            lr = opt.lr
            opt.zero_grad()
            est = elbo_step(xb, yb, model, prior, reverse_models, noise, n,
                            kl_weight=config.kl_weight, n_weight_samples=config.n_weight_samples)
            loss = -est.total * (1.0 / n)
            loss.backward()
            opt.step()
            model.clamp_log_vars()
            step += 1
            result.step_losses.append(float(loss.data))
            sums["aux_elbo"] += est.value * len(idx) / n
            sums["data_term"] += est.data_term * len(idx) / n
            sums["kl_bound_term"] += est.kl_bound_total * len(idx) / n
            correct += int((est.logits.data.argmax(axis=1) == yb).sum())
        test_acc = float("nan")
        if test is not None and ((epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1):
            test_acc = accuracy(model, test, config.eval_mode, np.random.default_rng(eval_rng_seed))
        row = {"step": step, "epoch": epoch, **sums, "train_acc": correct / n, "test_acc": test_acc, "lr": lr}
        result.trace.append(row)
        log.debug("vi epoch %d: %s", epoch, row)
    return result


# -- prediction -------------------------------------------------------------------------------

def parse_eval_mode(mode: str) -> tuple[str, int]:
    if mode == "mean":
        return "mean", 0
    if mode.startswith("mc"):
        _, _, s = mode.partition(":")
        return "mc", int(s or 1)
    raise ValueError(f"unknown eval mode {mode!r}; expected 'mean' or 'mc:S'")


def predict(model: Network, x, mode: str = "mean", rng: np.random.Generator | None = None,
            batch: int = 500) -> np.ndarray:
    """Class probabilities; ``mode`` is ``"mean"`` (eps = 0) or ``"mc:S"`` (average of S weight samples)."""
    kind, s = parse_eval_mode(mode)
    x = np.asarray(x)
    out = []
    with no_grad():
        for start in range(0, len(x), batch):
            xb = x[start:start + batch]
            if kind == "mean":
                out.append(F.softmax_np(model(xb, sample="mean").data, axis=1))
            else:
                acc = 0.0
                for _ in range(s):
                    acc = acc + F.softmax_np(model(xb, rng=rng, sample="weights").data, axis=1)
                out.append(acc / s)
    return np.concatenate(out) if out else np.zeros((0, 0))


def accuracy(model: Network, data, mode: str = "mean", rng=None) -> float:
    probs = predict(model, data.images, mode=mode, rng=rng)
    return float((probs.argmax(axis=1) == data.labels).mean())


# -- bound evaluation, IWAE and the gap ---------------------------------------------------

@dataclass
class BoundEstimate:
    mean: float
    se: float
    n: int
    draws: np.ndarray

    @classmethod
    def from_draws(cls, draws) -> "BoundEstimate":
        draws = np.asarray(draws, dtype=np.float64)
        se = float(draws.std(ddof=1) / np.sqrt(len(draws))) if len(draws) > 1 else float("nan")
        return cls(mean=float(draws.mean()), se=se, n=len(draws), draws=draws)


def _full_data_term(model, data, rng, batch=1000) -> float:
    total = 0.0
    with no_grad():
        for start in range(0, len(data.labels), batch):
            xb = data.images[start:start + batch]
            yb = data.labels[start:start + batch]
            logits = model(xb, rng=rng, sample="local")
            total -= float(F.cross_entropy(logits, yb, reduction="sum").data)
    return total


def _sample_layer_kernels(layer, rng) -> np.ndarray:
    th, lv = layer.theta.data, layer.log_var.data
    w = th + np.exp(0.5 * lv) * rng.standard_normal(th.shape).astype(th.dtype)
    return w.reshape(-1, *th.shape[-2:])


def aux_prior_term(kernels: np.ndarray, vae: VaeModel, reverse, rng) -> float:
    """``sum_k [E_r log p(w_k|z) - KL(r || p(z))]`` with one latent sample per kernel."""
    with no_grad():
        w = Tensor(kernels)
        mu_r, lv_r = reverse(w)
        z = reparam_sample(mu_r, lv_r, rng)
        mu_w, lv_w = vae.decode(z)
        recon = F.gaussian_log_prob(w, mu_w, lv_w).data.sum()
        kl = kl_to_standard_normal(mu_r, lv_r).data.sum()
    return float(recon - kl)


def iwae_prior_term(kernels: np.ndarray, vae: VaeModel, reverse, k: int, rng, chunk: int = 8192) -> float:
    """``sum_k log (1/K) sum_j p(w_k|z_j) p(z_j) / r(z_j|w_k)`` with ``z_j ~ r(z|w_k)``."""
    if k < 1:
        raise ValueError("iwae: K must be >= 1")
    n = len(kernels)
    with no_grad():
        mu_r, lv_r = reverse(Tensor(kernels))
    mu_r, lv_r = mu_r.data.astype(np.float64), lv_r.data.astype(np.float64)
    zd = mu_r.shape[1]
    logw = np.empty((n, k))
    rows_per_chunk = max(1, chunk // k) if k < chunk else 1
    for start in range(0, n, rows_per_chunk):
        stop = min(n, start + rows_per_chunk)
        for kstart in range(0, k, chunk):
            kk = min(k, kstart + chunk) - kstart
            m = stop - start
            eps = rng.standard_normal((m, kk, zd))
            std = np.exp(0.5 * lv_r[start:stop])[:, None, :]
            z = mu_r[start:stop, None, :] + std * eps
            log_r = -0.5 * (F.LOG_2PI + lv_r[start:stop, None, :] + eps ** 2).sum(-1)
            log_pz = -0.5 * (F.LOG_2PI + z ** 2).sum(-1)
            with no_grad():
                mu_w, lv_w = vae.decode(Tensor(z.reshape(m * kk, zd).astype(kernels.dtype)))
            w = np.repeat(kernels[start:stop], kk, axis=0).astype(np.float64)
            mw, lw = mu_w.data.astype(np.float64), lv_w.data.astype(np.float64)
            log_pw = (-0.5 * (F.LOG_2PI + lw + (w - mw) ** 2 * np.exp(-lw))).reshape(m, kk, -1).sum(-1)
            logw[start:stop, kstart:kstart + kk] = log_pw + log_pz - log_r
    mx = logw.max(axis=1, keepdims=True)
    lme = mx[:, 0] + np.log(np.exp(logw - mx).mean(axis=1))
    return float(lme.sum())


def _bound_draws(model: Network, prior: Dwp, reverse_models, data, n_outer, rng, prior_term) -> np.ndarray:
    h = sum(float(entropy_q(l.log_var).data) for l in model.bayes_layers())
    draws = []
    for _ in range(n_outer):
        val = (_full_data_term(model, data, rng) if data is not None else 0.0) + h
        for layer, rev in zip(model.bayes_layers(), reverse_models):
            vae = prior.vae_for(layer.theta.shape[-1])
            val += prior_term(_sample_layer_kernels(layer, rng), vae, rev, rng)
        draws.append(val)
    return np.asarray(draws)


def aux_bound(model: Network, prior: Dwp, reverse_models, data=None, n_outer: int = 10,
              rng: np.random.Generator | None = None) -> BoundEstimate:
    """Monte Carlo estimate of the auxiliary bound ``L_D + H(q) - E[KL(r||p) - E_r log p(w|z)]``."""
    rng = rng or np.random.default_rng(0)
    return BoundEstimate.from_draws(_bound_draws(model, prior, reverse_models, data, n_outer, rng, aux_prior_term))


def iwae_bound(model: Network, prior: Dwp, reverse_models, k: int, data=None, n_outer: int = 10,
               rng: np.random.Generator | None = None) -> BoundEstimate:
    """K-sample importance-weighted bound; ``data=None`` drops the (shared) data term."""
    rng = rng or np.random.default_rng(0)

    def term(kernels, vae, rev, r):
        return iwae_prior_term(kernels, vae, rev, k, r)

    return BoundEstimate.from_draws(_bound_draws(model, prior, reverse_models, data, n_outer, rng, term))


@dataclass
class GapReport:
    aux: BoundEstimate
    iwae: BoundEstimate
    aux_prior_reverse: BoundEstimate
    k: int

    @property
    def gap_lower_bound(self) -> float:
        return self.iwae.mean - self.aux.mean

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "aux_elbo": {"mean": self.aux.mean, "se": self.aux.se, "n": self.aux.n},
            "iwae_elbo": {"mean": self.iwae.mean, "se": self.iwae.se, "n": self.iwae.n},
            "gap_lower_bound": self.gap_lower_bound,
            "aux_elbo_prior_reverse": {"mean": self.aux_prior_reverse.mean, "se": self.aux_prior_reverse.se,
                                       "n": self.aux_prior_reverse.n},
        }


def gap_report(model: Network, prior: Dwp, reverse_models, k: int = 1000, data=None, n_outer: int = 10,
               seed: int = 0) -> GapReport:
    """Compare the auxiliary bound at the learned reverse models, at ``r = p(z)``, and the IWAE bound."""
    aux = aux_bound(model, prior, reverse_models, data, n_outer, stream(seed, "gap", "aux"))
    iw = iwae_bound(model, prior, reverse_models, k, data, n_outer, stream(seed, "gap", "iwae"))
    base = aux_bound(model, prior, prior_reverse_models(model, prior), data, n_outer, stream(seed, "gap", "prior"))
    return GapReport(aux=aux, iwae=iw, aux_prior_reverse=base, k=k)
