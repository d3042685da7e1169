"""SGD and Adam over a ParamSet, with constant or cosine learning rate."""

from __future__ import annotations

import math

import numpy as np

from .nets import GradReport, ParamSet


def cosine_lr(base_lr: float, step: int, total: int) -> float:
    if total <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total) / total))


def clip_grad_norm(grads: GradReport, max_norm: float) -> GradReport:
    """Rescale ``grads`` so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    c = max_norm / norm
    return {n: g * c for n, g in grads.items()}


class SGD:
    def __init__(self, params: ParamSet, lr: float = 1e-2):
        self.params = params
        self.lr = lr

    def step(self, grads: GradReport, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            p = self.params[name]
            p.values = p.values - lr * g


class Adam:
    def __init__(self, params: ParamSet, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(params[n].values) for n in params.trainable_names}
        self.v = {n: np.zeros_like(params[n].values) for n in params.trainable_names}

    def step(self, grads: GradReport, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, g in grads.items():
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            p = self.params[name]
            p.values = p.values - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
