"""AdamW with decoupled weight decay and a step-decay learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


class NumericalError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)
    lr: float = 1e-3


def adamw_update(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
                 state: OptimizerState, lr: float, weight_decay: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """One in-place AdamW step.

    Parameters whose gradient is ``None`` are skipped entirely: no moment
    update and no weight decay.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    beta1, beta2 = betas
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
        if name not in state.exp_avg:
            state.exp_avg[name] = np.zeros_like(p.data)
            state.exp_avg_sq[name] = np.zeros_like(p.data)
            state.steps[name] = 0
        state.steps[name] += 1
        t = state.steps[name]
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.data *= p.dtype.type(1.0 - lr * weight_decay)
        denom = np.sqrt(v) / math.sqrt(1.0 - beta2 ** t) + eps
        p.data -= (lr / (1.0 - beta1 ** t)) * m / denom
    state.lr = lr


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, weight_decay: float = 1e-2,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = OptimizerState(lr=lr)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items()}
        adamw_update(self.params, grads, self.state, self.state.lr, self.weight_decay,
                     self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def steplr(epoch: int, initial_lr: float, period: int, multiplier: float) -> float:
    if period < 1:
        raise ValueError(f"decay period must be >= 1, got {period}")
    return initial_lr * multiplier ** (epoch // period)
