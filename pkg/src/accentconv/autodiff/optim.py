"""SGD with momentum, AdamW and cosine annealing."""

from __future__ import annotations

import math
from typing import Iterable, List

import numpy as np

from .tensor import Tensor


class Optimizer:
    def __init__(self, params: Iterable[Tensor], lr: float):
        self.params: List[Tensor] = [p for p in params]
        if not self.params:
            raise ValueError("optimizer got an empty parameter list")
        self.lr = lr
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self):
        for p in self.params:
            if p.grad is not None and p.grad.shape != p.shape:
                raise ValueError(f"gradient shape {p.grad.shape} does not match parameter {p.shape}")
        return [p.grad for p in self.params]

    def state_arrays(self) -> List[np.ndarray]:
        return []

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """Heavy-ball SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr: float = 1e-3, momentum: float = 0.9, weight_decay: float = 2e-4):
        super().__init__(params, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [None] * len(self.params)

    def step(self) -> None:
        self.step_count += 1
        for i, (p, g) in enumerate(zip(self.params, self._grads())):
            if g is None:
                continue
            d = g + self.weight_decay * p.data if self.weight_decay else g
            if self.momentum:
                buf = self.buffers[i]
                buf = d.copy() if buf is None else self.momentum * buf + d
                self.buffers[i] = buf
                d = buf
            p.data -= (self.lr * d).astype(p.dtype, copy=False)

    def state_arrays(self):
        return [b for b in self.buffers if b is not None]


class AdamW(Optimizer):
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-3):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, self._grads(), self.m, self.v):
            if g is None:
                continue
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)

    def state_arrays(self):
        return self.m + self.v


def cosine_lr(t: int, lr0: float, lr_min: float, t_max: int) -> float:
    """lr_min + (lr0 - lr_min)(1 + cos(pi t / t_max)) / 2, held at lr_min past t_max."""
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    t = min(t, t_max)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / t_max))


class CosineAnnealing:
    def __init__(self, optimizer: Optimizer, t_max: int, lr_min: float = 0.0):
        self.optimizer = optimizer
        self.lr0 = optimizer.lr
        self.t_max = t_max
        self.lr_min = lr_min
        self.t = 0

    def step(self) -> float:
        self.t += 1
        self.optimizer.lr = cosine_lr(self.t, self.lr0, self.lr_min, self.t_max)
        return self.optimizer.lr
