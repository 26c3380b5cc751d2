from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per coordinate."""
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(Tensor(x)).data)
            flat[i] = orig - eps
            fm = float(f(Tensor(x)).data)
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Worst per-coordinate relative error between backprop and central differences.

    Relative error is |a - n| / max(|a|, |n|, 1e-8). ``f`` must be deterministic
    and build its graph from the tensor it is handed.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x.copy(), requires_grad=True)
    f(leaf).backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)
    numeric = numeric_grad(f, x, eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
