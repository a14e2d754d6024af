"""Adam with bias correction and an optional linear learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_horizon: int | None = None
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def current_lr(self) -> float:
        """Learning rate used by the next update: ``lr * max(0, 1 - step / horizon)``."""
        if not self.decay_horizon:
            return self.lr
        return self.lr * max(0.0, 1.0 - self.step / self.decay_horizon)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """Return updated copies of ``params``; ``state`` is advanced in place."""
    if state.step < 0:
        raise ValueError("adam_step: negative step count")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step", (len(params),), (len(grads),), detail="parameter/gradient count")
    lr = state.current_lr()
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        m = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        state.m[i], state.v[i] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out.append((p - update).astype(p.dtype, copy=False))
    state.step = t
    return out


class Adam:
    """Stateful wrapper applying :func:`adam_step` to tracked tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 decay_horizon: int | None = None):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, decay_horizon=decay_horizon)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new = adam_step([p.data for p in self.params], grads, self.state)
        for p, d in zip(self.params, new):
            p.data = d

    @property
    def lr(self) -> float:
        return self.state.current_lr()
