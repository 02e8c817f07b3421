"""Bias-corrected Adam over a dict of named parameter tensors."""

from __future__ import annotations

import numpy as np

from .nn import NonFiniteError


def adam_step(params, grads, m, v, t: int, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One in-place Adam update at step ``t`` (1-based).

    Every gradient is checked before any parameter moves, so a non-finite
    gradient leaves ``params``, ``m`` and ``v`` untouched.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m[name] *= beta1
        m[name] += (1.0 - beta1) * g
        v[name] *= beta2
        v[name] += (1.0 - beta2) * (g * g)
        m_hat = m[name] / bc1
        v_hat = v[name] / bc2
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}
        self.t = 0

    def step(self, params, grads) -> None:
        adam_step(params, grads, self.m, self.v, self.t + 1, self.lr, self.beta1, self.beta2, self.eps)
        self.t += 1
