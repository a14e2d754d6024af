"""Priors over convolution kernels.

Explicit priors (standard normal, log-uniform, full-covariance Gaussian)
have closed-form or approximate KL terms against the factorized Gaussian
posterior. :class:`Dwp` wraps frozen kernel-VAE decoders and is handled
by the auxiliary bound in :mod:`dwp.vi`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F

log = logging.getLogger(__name__)

# Sigmoid approximation to -KL(N(theta, alpha theta^2) || log-uniform),
# from the sparse variational dropout literature.
LOG_UNIFORM_K1 = 0.63576
LOG_UNIFORM_K2 = 1.87320
LOG_UNIFORM_K3 = 1.48695
LOG_UNIFORM_C = -LOG_UNIFORM_K1
THETA_GUARD = 1e-8


@dataclass(frozen=True)
class StandardNormal:
    kind: str = "standard-normal"


@dataclass(frozen=True)
class LogUniform:
    kind: str = "log-uniform"


@dataclass
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    jitter: float

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def precision(self) -> np.ndarray:
        inv_l = np.linalg.inv(self.chol)
        return inv_l.T @ inv_l


@dataclass
class GaussianML:
    """Full-covariance Gaussian per kernel size, fitted by maximum likelihood."""

    fits: dict[int, GaussianFit] = field(default_factory=dict)
    kind: str = "gaussian-ml"


@dataclass
class Dwp:
    """Deep weight prior: one frozen kernel VAE per kernel size.

    The VAE encoders serve as the template (and initial value) for the
    per-layer reverse models used during inference.
    """

    vaes: dict = field(default_factory=dict)
    kind: str = "dwp"

    def __post_init__(self):
        for vae in self.vaes.values():
            vae.freeze()

    def vae_for(self, kernel_size: int):
        try:
            return self.vaes[kernel_size]
        except KeyError:
            raise KeyError(f"dwp prior has no VAE for {kernel_size}x{kernel_size} kernels") from None


PriorSpec = StandardNormal | LogUniform | GaussianML | Dwp

PRIOR_KINDS = ("standard-normal", "log-uniform", "gaussian-ml", "dwp")


# -- KL terms ----------------------------------------------------------------------------

def kl_q_standard_normal(theta: Tensor, log_var: Tensor) -> Tensor:
    """``sum KL(N(theta, exp(log_var)) || N(0, 1))`` over elements."""
    return (0.5 * (F.exp(log_var) + F.square(theta) - 1.0 - log_var)).sum()


def kl_q_log_uniform_approx(theta: Tensor, log_var: Tensor) -> Tensor:
    """Approximate KL to the log-uniform prior, summed over elements.

    With ``alpha = exp(log_var) / theta^2``::

        -KL ~= k1 * sigmoid(k2 + k3 * log alpha) - 0.5 * log(1 + 1/alpha) + C,  C = -k1

    so that KL -> 0 as alpha -> inf. ``|theta|`` is floored at 1e-8.
    """
    th2 = F.square(theta)
    small = th2.data < THETA_GUARD ** 2
    if small.any():
        log.debug("log-uniform KL: %d means below guard clamped", int(small.sum()))
        th2 = F.clamp(th2, THETA_GUARD ** 2, None)
    log_alpha = log_var - F.log(th2)
    neg_kl = (LOG_UNIFORM_K1 * F.sigmoid(LOG_UNIFORM_K2 + LOG_UNIFORM_K3 * log_alpha)
              - 0.5 * F.softplus(-log_alpha) + LOG_UNIFORM_C)
    return (-neg_kl).sum()


def fit_gaussian_ml(kernels: np.ndarray) -> GaussianFit:
    """Closed-form ML mean and (biased) covariance of flattened kernels.

    A jitter of ``1e-6 * trace / dim`` (or ``1e-6`` for a zero-trace
    covariance) is added to the diagonal so the Cholesky factor exists.
    """
    x = np.asarray(kernels, dtype=np.float64).reshape(len(kernels), -1)
    if len(x) < 2:
        raise ValueError(f"fit_gaussian_ml: need at least 2 kernels, got {len(x)}")
    mean = x.mean(axis=0)
    d = x - mean
    cov = d.T @ d / len(x)
    tr = float(np.trace(cov))
    jitter = 1e-6 * tr / cov.shape[0] if tr > 0 else 1e-6
    cov = cov + jitter * np.eye(cov.shape[0])
    return GaussianFit(mean=mean, cov=cov, chol=np.linalg.cholesky(cov), jitter=jitter)


def log_prob_gaussian_full(w, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Exact multivariate normal log-density for rows of ``w`` via a Cholesky solve."""
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    d = mean.shape[0]
    if w.shape[-1] != d or chol.shape != (d, d):
        raise ValueError(f"log_prob_gaussian_full: dims {w.shape} vs mean {mean.shape}, chol {chol.shape}")
    diff = (w - mean).T
    sol = np.linalg.solve(chol, diff)
    maha = np.sum(sol * sol, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * F.LOG_2PI + logdet + maha)


def kl_diag_vs_full(theta: Tensor, log_var: Tensor, fit: GaussianFit) -> Tensor:
    """``sum_k KL(N(theta_k, diag exp(log_var_k)) || N(mean, cov))`` for rows ``k``.

    ``theta`` and ``log_var`` are ``(n, d)`` flattened kernels; the cross
    term is expanded analytically as ``-H(q) - E_q log p``.
    """
    n, d = theta.shape
    prec = fit.precision().astype(theta.dtype)
    diag_prec = Tensor(np.diag(prec).copy())
    logdet = 2.0 * float(np.sum(np.log(np.diag(fit.chol))))
    diff = theta - fit.mean.astype(theta.dtype)
    maha = (F.matmul(diff, Tensor(prec)) * diff).sum()
    trace = (F.exp(log_var) * diag_prec).sum()
    neg_cross = -0.5 * (n * d * F.LOG_2PI + n * logdet + trace + maha)
    entropy = (0.5 * (F.LOG_2PI + 1.0 + log_var)).sum()
    return -entropy - neg_cross


def explicit_kl(prior, layer) -> Tensor:
    """Closed-form (or approximate) KL for one Bayesian conv layer."""
    theta, log_var = layer.theta, layer.log_var
    if isinstance(prior, StandardNormal):
        return kl_q_standard_normal(theta, log_var)
    if isinstance(prior, LogUniform):
        return kl_q_log_uniform_approx(theta, log_var)
    if isinstance(prior, GaussianML):
        k = theta.shape[-1]
        if k not in prior.fits:
            raise KeyError(f"gaussian-ml prior has no fit for {k}x{k} kernels")
        flat = (-1, theta.shape[-2] * theta.shape[-1])
        return kl_diag_vs_full(theta.reshape(flat), log_var.reshape(flat), prior.fits[k])
    raise TypeError(f"no closed-form KL for prior {type(prior).__name__}")
