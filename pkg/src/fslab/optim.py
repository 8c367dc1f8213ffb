"""SGD with heavy-ball momentum."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from fslab.errors import ShapeError
from fslab.tensor import Tensor


class SGD:
    """p <- p - lr * v,  v <- momentum * v + g.

    Momentum buffers are kept per parameter for the optimizer's lifetime.
    Parameter arrays are replaced rather than mutated in place.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError(f"lr must be non-negative, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buffers: list[np.ndarray | None] = [None] * len(self.params)

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeError(f"{len(grads)} gradients for {len(self.params)} parameters")
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf = self._buffers[i]
            v = g if buf is None else self.momentum * buf + g
            self._buffers[i] = v
            p.data = p.data - self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``; returns the prior norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm > max_norm > 0:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)
    return norm


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float,
             momentum: float = 0.0, optimizer: SGD | None = None) -> SGD:
    """Functional front end: apply one update, returning the optimizer holding the buffers."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    opt = optimizer or SGD(params, lr, momentum)
    opt.lr, opt.momentum = lr, momentum
    opt.step(grads)
    return opt
