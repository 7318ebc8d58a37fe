"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One Adam update on raw arrays; returns (new_param, new_m, new_v).

    ``t`` is the 1-based step count after incrementing.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Tracks first/second moment state per named parameter.

    The shared step counter increments exactly once per ``step()`` call.
    """

    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            p.data, self.m[name], self.v[name] = adam_step(
                p.data, p.grad, self.m[name], self.v[name],
                self.t, self.lr, self.beta1, self.beta2, self.eps,
            )

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()

    def state_entries(self):
        """Named arrays for optional checkpoint inclusion."""
        yield "optim.t", np.asarray([self.t], dtype=np.float64)
        for name, _ in self.params:
            yield f"optim.m.{name}", self.m[name]
            yield f"optim.v.{name}", self.v[name]
