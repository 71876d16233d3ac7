"""SGD with momentum and a decoupled-weight-decay adaptive optimizer, both
behind one step() interface, plus a cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

__all__ = ["SGD", "AdamW", "cosine_lr"]


class _Optimizer:
    def __init__(self, params: dict, lr: float):
        self.params = dict(params)
        self.lr = lr

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        raise NotImplementedError


class SGD(_Optimizer):
    def __init__(self, params: dict, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._vel = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self._vel[name]
            v *= self.momentum
            v += g
            p.data -= (self.lr * v).astype(p.data.dtype)


class AdamW(_Optimizer):
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.05):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._t = 0

    def step(self):
        self._t += 1
        bc1 = 1.0 - self.b1 ** self._t
        bc2 = 1.0 - self.b2 ** self._t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self._m[name], self._v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                upd = upd + self.weight_decay * p.data
            p.data -= (self.lr * upd).astype(p.data.dtype)


def cosine_lr(base_lr: float, step: int, total_steps: int,
              min_lr: float = 0.0) -> float:
    if total_steps <= 1:
        return base_lr
    frac = min(step / (total_steps - 1), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * frac))
