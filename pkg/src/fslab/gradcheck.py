"""Finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from fslab.errors import TapeError
from fslab.tensor import Tensor, backward, no_grad


def numerical_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``fn`` w.r.t. every coordinate of every input."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    with no_grad():
        for k, a in enumerate(arrays):
            g = np.zeros_like(a)
            flat, gflat = a.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = fn(*[Tensor(x) for x in arrays]).item()
                flat[i] = orig - eps
                fm = fn(*[Tensor(x) for x in arrays]).item()
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * eps)
            grads.append(g)
    return grads


def analytic_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    if out.size != 1:
        raise TapeError(f"grad_check needs a scalar-valued fn, got shape {out.shape}")
    backward(out)
    return [leaf.grad for leaf in leaves]


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Max over coordinates of |autodiff - central difference| / max(1, |central difference|)."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    inputs = [np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    auto = analytic_grad(fn, inputs)
    num = numerical_grad(fn, inputs, eps)
    worst = 0.0
    for a, n in zip(auto, num):
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n)))))
    return worst
