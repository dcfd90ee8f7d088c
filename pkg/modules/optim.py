"""
AdamW with decoupled weight decay and global gradient-norm clipping.
"""

from dataclasses import dataclass
from typing import Dict, Mapping

import numpy as np

from modules.tensor import Tensor


class TrainingDivergence(RuntimeError):
    """Loss or gradients stopped being finite."""


@dataclass
class OptimizerConfig:
    lr: float = 3e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0

    def validate(self):
        if self.lr < 0:
            raise ValueError("Скорость обучения не может быть отрицательной")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1/beta2 должны лежать в [0, 1)")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm должен быть положительным")


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most `max_norm`; returns the norm before clipping."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if not np.isfinite(total):
        raise TrainingDivergence("Норма градиента нечисловая")
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


class AdamW:
    """Adam moments with weight decay applied directly to the weights."""

    def __init__(self, params: Mapping[str, Tensor], cfg: OptimizerConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.step_count = 0
        self._m: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._v: Dict[str, np.ndarray] = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        cfg = self.cfg
        self.step_count += 1
        bias1 = 1.0 - cfg.beta1 ** self.step_count
        bias2 = 1.0 - cfg.beta2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self._m[name], self._v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * p.grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * p.grad * p.grad
            p.data *= 1.0 - cfg.lr * cfg.weight_decay
            p.data -= cfg.lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
