"""Adam and plain SGD over named float32 parameter tensors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DTYPE, Tensor


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in tensor {name!r}; step refused")
        self.name = name


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _check_finite(params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place. Missing gradients count as zero."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    _check_finite(params, grads)
    state.step += 1
    t = state.step
    b1, b2 = DTYPE(beta1), DTYPE(beta2)
    corr1 = 1.0 - beta1 ** t
    corr2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = DTYPE(lr) * (m / DTYPE(corr1)) / (np.sqrt(v / DTYPE(corr2)) + DTYPE(eps))
        p.data = (p.data - update).astype(DTYPE)


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    _check_finite(params, grads)
    for name, p in params.items():
        if name in grads:
            p.data = (p.data - DTYPE(lr) * grads[name]).astype(DTYPE)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr
        self.state = AdamState()

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state, self.lr)
