"""AdamW with decoupled weight decay and the linear-warmup + cosine schedule."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .errors import TrainingError, UsageError
from .numcore import Tensor


def lr_at(step: float, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear warmup over the first ``warmup_fraction`` of steps, then cosine decay to 0."""
    if not 0 <= step <= total_steps:
        raise UsageError(f"step {step} outside [0, {total_steps}]")
    w = warmup_fraction * total_steps
    if step < w:
        return base_lr * step / w
    span = total_steps - w
    if span <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / span))


def global_grad_norm(params: Mapping[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float | None) -> float:
    norm = global_grad_norm(params)
    if max_norm is not None and max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


class AdamW:
    """m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  bias-corrected;
    theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta)."""

    def __init__(self, params: Mapping[str, Tensor], weight_decay: float = 0.1,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out
