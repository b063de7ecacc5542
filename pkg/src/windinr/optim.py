"""Adam-family optimizers over named parameter dictionaries.

AdamW applies decoupled weight decay (the decay term multiplies the learning
rate but not the adaptive moments). Gradient clipping rescales the global
norm across all parameters jointly.
"""

from __future__ import annotations

import numpy as np


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm."""
    total = float(np.sqrt(sum(float((g**2).sum()) for g in grads.values())))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decoupled: bool = False,
                 clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> float:
        """Apply one update; returns the (pre-clip) global gradient norm."""
        self.t += 1
        if self.clip_norm is not None:
            grads = {k: g.copy() for k, g in grads.items()}
            norm = clip_global_norm(grads, self.clip_norm)
        else:
            norm = float(np.sqrt(sum(float((g**2).sum()) for g in grads.values())))
        for k, g in grads.items():
            if not self.decoupled and self.weight_decay:
                g = g + self.weight_decay * self.params[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mh = self.m[k] / (1 - self.b1**self.t)
            vh = self.v[k] / (1 - self.b2**self.t)
            upd = mh / (np.sqrt(vh) + self.eps)
            if self.decoupled and self.weight_decay:
                upd = upd + self.weight_decay * self.params[k]
            self.params[k] -= self.lr * upd
        return norm


def adamw(params: dict[str, np.ndarray], lr: float, weight_decay: float) -> Adam:
    return Adam(params, lr, weight_decay=weight_decay, decoupled=True)
