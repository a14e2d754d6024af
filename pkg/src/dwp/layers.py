"""Deterministic and Bayesian convolutional networks.

Only convolution kernels are variational. Each Bayesian convolution holds
a fully-factorized Gaussian posterior with mean ``theta`` and an
independent log-variance ``log_var`` (additive parameterization);
biases and the linear classifier are point estimates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Module, Tensor, parameter, xavier_uniform
from .autodiff import functional as F
from .autodiff.module import Linear

LOG_VAR_MIN, LOG_VAR_MAX = -20.0, 5.0
LOG_VAR_INIT = -6.0
VARIANCE_FLOOR = 1e-8
LEAKY_SLOPE = 0.01


# -- posterior primitives ----------------------------------------------------------

def sample_weights(theta: Tensor, log_var: Tensor, rng: np.random.Generator | None, eps: np.ndarray | None = None) -> Tensor:
    """Reparametrized draw ``theta + exp(log_var / 2) * eps``."""
    if theta.shape != log_var.shape:
        raise ValueError(f"sample_weights: shapes differ {theta.shape} vs {log_var.shape}")
    if eps is None:
        eps = rng.standard_normal(theta.shape).astype(theta.dtype)
    return theta + F.exp(0.5 * log_var) * eps


def bayes_conv_local_reparam(x: Tensor, theta: Tensor, log_var: Tensor, rng: np.random.Generator,
                             bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Sample pre-activations directly from their Gaussian marginals.

    ``m = conv(x, theta) + b``, ``v = conv(x^2, exp(log_var))`` and the
    output is ``m + sqrt(v + 1e-8) * eps`` with independent ``eps`` per
    output location.
    """
    m = F.conv2d(x, theta, bias, stride=stride, padding=padding)
    v = F.conv2d(F.square(x), F.exp(log_var), stride=stride, padding=padding)
    eps = rng.standard_normal(m.shape).astype(m.dtype)
    return m + F.sqrt(v + VARIANCE_FLOOR) * eps


def entropy_q(log_var: Tensor) -> Tensor:
    """Entropy of the factorized Gaussian posterior, summed over elements."""
    return (0.5 * (F.LOG_2PI + 1.0 + log_var)).sum()


# -- layers -----------------------------------------------------------------------------

class ConvLayer(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.weight = parameter(xavier_uniform((out_ch, in_ch, kernel, kernel), rng, dtype))
        self.bias = parameter(np.zeros(out_ch, dtype=dtype))

    @property
    def kernels(self) -> Tensor:
        return self.weight

    def forward(self, x, rng=None, sample="mean"):
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BayesConv2d(Module):
    """Convolution with posterior ``N(theta, diag(exp(log_var)))`` over kernels.

    Kernels are stored ``(out, in, kh, kw)``; each ``[o, i]`` slice is one
    spatial kernel with its own factor of the posterior.
    """

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, rng=None, dtype=np.float32,
                 log_var_init: float = LOG_VAR_INIT):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.theta = parameter(xavier_uniform((out_ch, in_ch, kernel, kernel), rng, dtype))
        self.log_var = parameter(np.full((out_ch, in_ch, kernel, kernel), log_var_init, dtype=dtype))
        self.bias = parameter(np.zeros(out_ch, dtype=dtype))

    @property
    def kernels(self) -> Tensor:
        return self.theta

    def clamp_log_var(self) -> None:
        self.log_var.data = np.clip(self.log_var.data, LOG_VAR_MIN, LOG_VAR_MAX)

    def forward(self, x, rng=None, sample="mean"):
        if sample == "mean":
            return F.conv2d(x, self.theta, self.bias, stride=self.stride, padding=self.padding)
        if sample == "local":
            return bayes_conv_local_reparam(x, self.theta, self.log_var, rng, self.bias, self.stride, self.padding)
        if sample == "weights":
            w = sample_weights(self.theta, self.log_var, rng)
            return F.conv2d(x, w, self.bias, stride=self.stride, padding=self.padding)
        raise ValueError(f"unknown sampling mode {sample!r}")


class LinearLayer(Linear):
    def forward(self, x, rng=None, sample="mean"):
        return F.linear(x, self.weight, self.bias)


class LeakyReLU(Module):
    def __init__(self, slope: float = LEAKY_SLOPE):
        self.slope = slope

    def forward(self, x, rng=None, sample="mean"):
        return F.leaky_relu(x, self.slope)


class MaxPool(Module):
    def forward(self, x, rng=None, sample="mean"):
        return F.max_pool2d(x, 2, 2)


class Flatten(Module):
    def forward(self, x, rng=None, sample="mean"):
        return F.flatten(x)


# -- architecture description ----------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | pool | lrelu | flatten | linear
    size: int = 0  # filters for conv, outputs for linear
    kernel: int = 0
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int] = (1, 28, 28)
    width_scale: float = 1.0

    def scaled_filters(self, n: int) -> int:
        return max(1, int(round(n * self.width_scale)))

    def conv_filters(self) -> list[int]:
        return [self.scaled_filters(l.size) for l in self.layers if l.kind == "conv"]


def _conv_pool_net(filters: tuple[int, int], classes: int, k: float, input_shape) -> NetworkSpec:
    return NetworkSpec(
        layers=(
            LayerSpec("conv", filters[0], 7),
            LayerSpec("lrelu"),
            LayerSpec("pool"),
            LayerSpec("conv", filters[1], 5),
            LayerSpec("lrelu"),
            LayerSpec("pool"),
            LayerSpec("flatten"),
            LayerSpec("linear", classes),
        ),
        input_shape=tuple(input_shape),
        width_scale=k,
    )


def mnist_spec(k: float = 1.0, classes: int = 10, input_shape=(1, 28, 28)) -> NetworkSpec:
    """Target classifier: conv 32@7x7, conv 128@5x5, each followed by leaky ReLU and 2x2 max-pool."""
    return _conv_pool_net((32, 128), classes, k, input_shape)


def source_spec(k: float = 1.0, classes: int = 10, input_shape=(1, 28, 28)) -> NetworkSpec:
    """Source network whose kernels seed the prior: conv 256@7x7, conv 512@5x5."""
    return _conv_pool_net((256, 512), classes, k, input_shape)


class Network(Module):
    def __init__(self, spec: NetworkSpec, layers: list[Module], mode: str):
        self.spec = spec
        self.mode = mode
        self.layers = layers

    def forward(self, x, rng=None, sample="mean"):
        h = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.layers:
            h = layer(h, rng=rng, sample=sample)
        return h

    def conv_layers(self) -> list[Module]:
        return [l for l in self.layers if isinstance(l, (ConvLayer, BayesConv2d))]

    def bayes_layers(self) -> list[BayesConv2d]:
        return [l for l in self.layers if isinstance(l, BayesConv2d)]

    def head_parameters(self) -> list[Tensor]:
        return [p for l in self.layers if isinstance(l, LinearLayer) for p in l.parameters()]

    def clamp_log_vars(self) -> None:
        for l in self.bayes_layers():
            l.clamp_log_var()


class ShapeChainError(ValueError):
    pass


def build_network(spec: NetworkSpec, mode: str = "deterministic", rng: np.random.Generator | None = None,
                  dtype=np.float32) -> Network:
    """Instantiate ``spec``; ``mode`` is ``"deterministic"`` or ``"bayesian"``."""
    if mode not in ("deterministic", "bayesian"):
        raise ValueError(f"unknown network mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    c, h, w = spec.input_shape
    flat = None
    layers: list[Module] = []
    for i, ls in enumerate(spec.layers):
        if ls.kind == "conv":
            if flat is not None:
                raise ShapeChainError(f"layer {i}: conv after flatten")
            out = spec.scaled_filters(ls.size)
            cls = BayesConv2d if mode == "bayesian" else ConvLayer
            layers.append(cls(c, out, ls.kernel, ls.stride, ls.padding, rng=rng, dtype=dtype))
            h = F.conv_output_size(h, ls.kernel, ls.stride, ls.padding)
            w = F.conv_output_size(w, ls.kernel, ls.stride, ls.padding)
            c = out
            if h < 1 or w < 1:
                raise ShapeChainError(f"layer {i}: conv {ls.kernel}x{ls.kernel} does not fit input")
        elif ls.kind == "pool":
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ShapeChainError(f"layer {i}: pooling empties the feature map")
            layers.append(MaxPool())
        elif ls.kind == "lrelu":
            layers.append(LeakyReLU())
        elif ls.kind == "flatten":
            flat = c * h * w
            layers.append(Flatten())
        elif ls.kind == "linear":
            if flat is None:
                raise ShapeChainError(f"layer {i}: linear before flatten")
            layers.append(LinearLayer(flat, ls.size, rng=rng, dtype=dtype))
            flat = ls.size
        else:
            raise ShapeChainError(f"layer {i}: unknown kind {ls.kind!r}")
    return Network(spec, layers, mode)


def copy_kernels(src: Network, dst: Network) -> None:
    """Copy kernel means, biases and head weights from ``src`` into ``dst``."""
    for a, b in zip(src.conv_layers(), dst.conv_layers()):
        b.kernels.data = a.kernels.data.copy()
        b.bias.data = a.bias.data.copy()
    for a, b in zip([l for l in src.layers if isinstance(l, LinearLayer)],
                    [l for l in dst.layers if isinstance(l, LinearLayer)]):
        b.weight.data = a.weight.data.copy()
        b.bias.data = a.bias.data.copy()
