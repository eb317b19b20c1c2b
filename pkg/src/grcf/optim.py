"""AdamW with decoupled weight decay, global-norm clipping and cosine decay."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor
from .errors import NonFiniteError


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


def global_grad_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads]
    return grads


class AdamW:
    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lrs: dict[str, float], weight_decay: float,
             grads: dict[str, np.ndarray] | None = None) -> None:
        """One update; ``lrs`` maps parameter name to its learning rate."""
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items()}
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {k}; step aborted")
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            lr = lrs[k]
            p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + weight_decay * p.data)
